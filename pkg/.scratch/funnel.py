"""Scratch: SSM with a recurrent readout funnel feeding the heads."""
import sys, time
import numpy as np

import proprio.model as M
import proprio.autodiff as ad
from proprio.experiments import GROUPS, PROFILES, model_config, group_dataset
from proprio.loss import LossConfig
from proprio.trainer import TrainConfig, train
from proprio import coupling

D_STATE = int(sys.argv[1]) if len(sys.argv) > 1 else 8
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 10

orig_shapes = M.parameter_shapes

def shapes_v(config):
    shapes = orig_shapes(config)
    if config.arch != M.SSM:
        return shapes
    d, s = config.d_model, config.d_state
    shapes["readout.w_dt"] = (d, s)
    shapes["readout.b_dt"] = (s,)
    shapes["readout.a"] = (s,)
    shapes["readout.w_b"] = (d, s)
    shapes["readout.w_o"] = (s, d)
    return shapes

def build_graph_v(params, tokens):
    config = params.config
    B, T = tokens.shape
    leaves = {name: ad.Tensor(arr) for name, arr in params.tensors.items()}
    x = ad.embedding(leaves["tok_emb"], tokens)
    if config.arch == M.TRANSFORMER:
        x = x + ad.embedding(leaves["pos_emb"], np.arange(T))
    state = None
    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        if config.arch == M.SSM:
            x, state = M._ssm_block(leaves, x, prefix)
        else:
            x, _ = M._attn_block(leaves, x, prefix, config)
    if config.arch == M.SSM:
        rn = ad.rmsnorm(x, leaves["norm_f"])
        delta = ad.softplus(rn @ leaves["readout.w_dt"] + leaves["readout.b_dt"])
        decay = ad.exp(-(delta * ad.softplus(leaves["readout.a"])))
        inject = delta * (rn @ leaves["readout.w_b"])
        h = ad.scan(decay, inject)
        state = h
        hidden = h @ leaves["readout.w_o"]
        # no residual: heads see the funnel state only
        hidden = ad.rmsnorm(hidden, ad.Tensor(np.ones(config.d_model, dtype=np.float32)))
    else:
        hidden = ad.rmsnorm(x, leaves["norm_f"])
    logits = hidden @ leaves["token_head.w"] + leaves["token_head.b"]
    halt_logits = (hidden @ leaves["halt_head.w"] + leaves["halt_head.b"]).reshape(B, T)
    return {"logits": logits, "halt_logits": halt_logits,
            "hidden": hidden, "state": state}, leaves

M.parameter_shapes = shapes_v
M.build_graph = build_graph_v
import proprio.trainer as TR, proprio.evaluate as EV
TR.build_graph = build_graph_v

profile = PROFILES["desk"]
profile = type(profile)(**{**profile.__dict__, "d_state": D_STATE})
ds = group_dataset("parity", profile, 0)
for gid in ("E_ssm", "D", "C"):
    spec = GROUPS[gid]
    params0 = M.init_model(model_config(spec, profile, 0))
    t0 = time.time()
    params, hist = train(params0, ds, LossConfig(alpha=spec.alpha, beta=spec.beta),
                         TrainConfig(epochs=EPOCHS, lr=profile.lr,
                                     batch_size=profile.batch_size, seed=0))
    last = hist.records[-1]
    trajs = coupling.collect_trajectories(params, ds.test, coupling.D_STATE)
    st = coupling.group_stats(trajs, n_boot=200)
    print("funnel s=%d %-6s acc=%.3f f1=%.2f | mean_r=%+.3f med=%+.3f frac=%.2f tau=%s (%.0fs)" % (
        D_STATE, gid, last["val_tf_accuracy"], last["val_halt_f1"],
        st.mean_r, st.median_r, st.frac_sig, st.tau_drv, time.time() - t0))
