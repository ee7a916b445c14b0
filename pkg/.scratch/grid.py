"""Scratch: robustness grid for the funnel register design."""
import sys, time
import numpy as np

import proprio.model as M
import proprio.autodiff as ad
from proprio.experiments import GROUPS, PROFILES, model_config, group_dataset
from proprio.loss import LossConfig
from proprio.trainer import TrainConfig, train
from proprio import coupling

orig_shapes = M.parameter_shapes
orig_init = M.init_model

def make_variant(d_state, b_dt, hetero, rate_lo=0.05, rate_hi=0.7):
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
            if hetero:
                rates = np.geomspace(rate_lo, rate_hi, s)
                t["readout.a"] = np.log(np.expm1(rates)).astype(np.float32)
            t["readout.b_dt"] = np.full(s, np.log(np.expm1(b_dt)), np.float32)
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
            hidden = ad.silu(h) @ leaves["readout.w_o"]
        else:
            hidden = ad.rmsnorm(x, leaves["norm_f"])
        logits = hidden @ leaves["token_head.w"] + leaves["token_head.b"]
        halt_logits = (hidden @ leaves["halt_head.w"] + leaves["halt_head.b"]).reshape(B, T)
        return {"logits": logits, "halt_logits": halt_logits,
                "hidden": hidden, "state": state}, leaves
    return shapes_v, init_v, build_graph_v


def run(tag, d_state, b_dt, hetero, epochs, gids=("E_ssm",), seeds=(0, 1, 2)):
    import proprio.trainer as TR
    shapes_v, init_v, build_v = make_variant(d_state, b_dt, hetero)
    M.parameter_shapes = shapes_v
    M.init_model = init_v
    M.build_graph = build_v
    TR.build_graph = build_v
    profile = PROFILES["desk"]
    profile = type(profile)(**{**profile.__dict__, "d_state": d_state})
    ds = group_dataset("parity", profile, 0)
    for gid in gids:
        for seed in seeds:
            spec = GROUPS[gid]
            params0 = M.init_model(model_config(spec, profile, seed))
            t0 = time.time()
            params, hist = train(params0, ds,
                                 LossConfig(alpha=spec.alpha, beta=spec.beta),
                                 TrainConfig(epochs=epochs, lr=profile.lr,
                                             batch_size=profile.batch_size, seed=seed))
            last = hist.records[-1]
            trajs = coupling.collect_trajectories(params, ds.test, "d_state")
            st = coupling.group_stats(trajs, n_boot=200)
            print("%-24s %-6s seed=%d acc=%.3f f1=%.2f | r=%+.3f frac=%.2f tau=%+.1f (%.0fs)" % (
                tag, gid, seed, last["val_tf_accuracy"], last["val_halt_f1"],
                st.mean_r, st.frac_sig, st.tau_drv, time.time() - t0), flush=True)


if __name__ == "__main__":
    which = sys.argv[1]
    if which == "a":
        run("s8_b1.5_15ep", 8, 1.5, False, 15)
        run("s12_b1.5_20ep", 12, 1.5, False, 20)
    elif which == "b":
        run("s12_het_b1.5_15ep", 12, 1.5, True, 15)
        run("s8_het_b1.5_15ep", 8, 1.5, True, 15)
