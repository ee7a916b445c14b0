"""Scratch: symmetry-breaking variants of the funnel readout."""
import sys, time
import numpy as np

import proprio.model as M
import proprio.autodiff as ad
from proprio.experiments import GROUPS, PROFILES, model_config, group_dataset
from proprio.loss import LossConfig
from proprio.trainer import TrainConfig, train
from proprio import coupling

VARIANT = sys.argv[1]
GROUP_IDS = sys.argv[2].split(",") if len(sys.argv) > 2 else ["E_ssm"]
EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 10

orig_shapes = M.parameter_shapes
orig_init = M.init_model

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

def init_v(config):
    params = orig_init(config)
    t = params.tensors
    if config.arch == M.SSM:
        s = config.d_state
        if "hetero" in VARIANT:
            # decay rates log-spaced: slow dims hold, fast dims churn
            rates = np.geomspace(0.05, 0.7, s)
            t["readout.a"] = np.log(np.expm1(rates)).astype(np.float32)
        if "fast" in VARIANT:
            # softplus(b_dt) ~ 1.5: the register rewrites every step
            t["readout.b_dt"] = np.full(s, np.log(np.expm1(1.5)), np.float32)
    return params

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
        read = ad.silu(h) if "silu" in VARIANT else h
        hidden = read @ leaves["readout.w_o"]
        if "nonorm" not in VARIANT:
            hidden = ad.rmsnorm(hidden, ad.Tensor(np.ones(config.d_model, dtype=np.float32)))
    else:
        hidden = ad.rmsnorm(x, leaves["norm_f"])
    logits = hidden @ leaves["token_head.w"] + leaves["token_head.b"]
    halt_logits = (hidden @ leaves["halt_head.w"] + leaves["halt_head.b"]).reshape(B, T)
    return {"logits": logits, "halt_logits": halt_logits,
            "hidden": hidden, "state": state}, leaves

M.parameter_shapes = shapes_v
M.init_model = init_v
M.build_graph = build_graph_v
import proprio.trainer as TR
TR.build_graph = build_graph_v

profile = PROFILES["desk"]
ds = group_dataset("parity", profile, 0)
for gid in GROUP_IDS:
    spec = GROUPS[gid]
    params0 = M.init_model(model_config(spec, profile, 0))
    t0 = time.time()
    params, hist = train(params0, ds, LossConfig(alpha=spec.alpha, beta=spec.beta),
                         TrainConfig(epochs=EPOCHS, lr=profile.lr,
                                     batch_size=profile.batch_size, seed=0))
    last = hist.records[-1]
    trajs = coupling.collect_trajectories(params, ds.test, coupling.D_STATE)
    st = coupling.group_stats(trajs, n_boot=200)
    print("%-22s %-6s acc=%.3f f1=%.2f | mean_r=%+.3f med=%+.3f frac=%.2f tau=%s (%.0fs)" % (
        VARIANT, gid, last["val_tf_accuracy"], last["val_halt_f1"],
        st.mean_r, st.median_r, st.frac_sig, st.tau_drv, time.time() - t0))
