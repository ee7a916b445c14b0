"""Scratch: which SSM block variant makes state-entropy collapse emerge?"""
import sys, time
import numpy as np

import proprio.model as M
import proprio.autodiff as ad
from proprio.experiments import GROUPS, PROFILES, model_config, group_dataset
from proprio.loss import LossConfig
from proprio.trainer import TrainConfig, train
from proprio import coupling

VARIANT = sys.argv[1]
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 10

orig_shapes = M.parameter_shapes

def shapes_v(config):
    shapes = orig_shapes(config)
    if config.arch != M.SSM:
        return shapes
    d, s = config.d_model, config.d_state
    for i in range(config.n_layers):
        p = f"layers.{i}."
        if VARIANT in ("dimdelta", "noskip", "nogate", "linear"):
            shapes[p + "w_dt"] = (d, s)
            shapes[p + "b_dt"] = (s,)
        if VARIANT in ("nogate", "linear"):
            shapes.pop(p + "w_c")
        if VARIANT in ("noskip", "linear"):
            shapes.pop(p + "d_skip")
    return shapes

def ssm_block_v(t, x, prefix):
    rn = ad.rmsnorm(x, t[prefix + "norm1"])
    delta = ad.softplus(rn @ t[prefix + "w_dt"] + t[prefix + "b_dt"])
    decay = ad.exp(-(delta * ad.softplus(t[prefix + "a"])))
    inject = delta * (rn @ t[prefix + "w_b"])
    h = ad.scan(decay, inject)
    if VARIANT in ("dimdelta", "noskip"):
        y = (rn @ t[prefix + "w_c"]) * h
    else:
        y = h
    mix = y @ t[prefix + "w_o"]
    if VARIANT in ("dimdelta", "nogate"):
        mix = mix + t[prefix + "d_skip"] * rn
    x = x + mix
    rn2 = ad.rmsnorm(x, t[prefix + "norm2"])
    up = ad.silu(rn2 @ t[prefix + "w_up"]) * (rn2 @ t[prefix + "w_gate"])
    return x + up @ t[prefix + "w_down"], h

if VARIANT != "base":
    M.parameter_shapes = shapes_v
    M._ssm_block = ssm_block_v

profile = PROFILES["desk"]
ds = group_dataset("parity", profile, 0)
for gid in ("E_ssm", "C"):
    spec = GROUPS[gid]
    params0 = M.init_model(model_config(spec, profile, 0))
    t0 = time.time()
    params, hist = train(params0, ds, LossConfig(alpha=spec.alpha, beta=spec.beta),
                         TrainConfig(epochs=EPOCHS, lr=profile.lr,
                                     batch_size=profile.batch_size, seed=0))
    last = hist.records[-1]
    trajs = coupling.collect_trajectories(params, ds.test, coupling.D_STATE)
    st = coupling.group_stats(trajs, n_boot=200)
    print("%s %-8s acc=%.3f f1=%.2f | mean_r=%+.3f med=%+.3f frac=%.2f tau=%s (%.0fs)" % (
        VARIANT, gid, last["val_tf_accuracy"], last["val_halt_f1"],
        st.mean_r, st.median_r, st.frac_sig, st.tau_drv, time.time() - t0))
