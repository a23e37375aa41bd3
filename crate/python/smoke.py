"""Smoke test for the Python bindings.

Build the module first, for example

    cargo build --release -p confflow-py --features extension-module
    cp target/release/libconfflow_py.so python/confflow_py.so

then run `python3 python/smoke.py` from the repository root.
"""
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import confflow_py as cf  # noqa: E402

TINY = """
net.hidden_dim = 8
net.num_layers = 2
net.time_embed_dim = 4
stage1.epochs = 2
stage1.batch_size = 16
stage2.epochs = 1
stage2.batch_size = 16
stage3.epochs = 1
stage3.batch_size = 2
stage3.probes = 2
stage3.ode_steps = 3
sampler.steps = 5
toy.conformers_per_molecule = 32
"""


def main():
    # geometry
    q = cf.quat_exp((0.3, -0.2, 0.5))
    v = cf.quat_log(q)
    assert max(abs(a - b) for a, b in zip(v, (0.3, -0.2, 0.5))) < 1e-12
    mid = cf.slerp((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0), 0.5)
    assert abs(mid[0] - math.sqrt(0.5)) < 1e-12

    # transport
    plan = cf.sinkhorn([[0.0, 1.0], [1.0, 0.0]], epsilon=0.05, max_iters=500)
    assert abs(sum(map(sum, plan)) - 1.0) < 1e-9 and plan[0][0] > 0.49

    # data, decomposition, roundtrip
    config = cf.Config(TINY)
    config.reseed(3)
    data = cf.Dataset.toy(config)
    assert len(data) == 1 and data.num_conformers() == 32
    d = data.decompose(0, 0)
    assert len(d.r) == 3 and len(d.phi) == 1
    x = data.conformers(0)[0]
    assert cf.kabsch_rmsd(data.reconstruct(0, 0), x) < 1e-9

    # train, sample, score
    model = cf.Model(config)
    losses = model.train(config, data, [1, 2, 3])
    assert model.stage == 3 and all(math.isfinite(l) for l in losses)
    gen = model.sample(config, data, 0, 8, steps=5, method="rk4", seed=1)
    assert len(gen) == 8 and len(gen[0]) == 4
    cov_r, mat_r, cov_p, mat_p = cf.cov_mat(gen, data.conformers(0), 0.5)
    assert 0.0 <= cov_r <= 100.0 and mat_r >= 0.0
    ll = model.log_likelihood(config, data, 0, probes=2, steps=3)
    assert len(ll) == 32 and all(math.isfinite(v) for v in ll)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = cf.Model.load(path)
        assert again.sample(config, data, 0, 8, steps=5, method="rk4", seed=1) == gen

    # errors surface as Python exceptions
    try:
        cf.Config("stage1.epoch = 3")
    except ValueError as e:
        assert "epoch" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    rows = cf.run_checks(0)
    assert all(r[4] for r in rows), rows
    print(f"smoke ok: {len(losses)} training steps, COV-R {cov_r:.1f}% MAT-R {mat_r:.3f}, {len(rows)} checks passed")


if __name__ == "__main__":
    main()
