"""Smoke tests for the Python module: every exported surface touched once,
plus one micro end-to-end pipeline run. Heavier numerics live in the C++
unit and acceptance suites."""

import json
import math
import os
import pathlib
import tempfile

import numpy as np
import pytest

import ceip

CONFIG_DIR = pathlib.Path(
    os.environ.get(
        "CEIP_CONFIG_DIR",
        pathlib.Path(__file__).resolve().parents[2] / "configs",
    )
)


def test_affine_round_trip_and_density():
    m = ceip.AffineMap(scale=np.array([2.0, 0.5]), shift=np.array([1.0, -1.0]))
    a = np.array([0.3, 2.2])
    z = ceip.affine_inverse(m, a)
    assert np.allclose(ceip.affine_forward(m, z), a, atol=1e-12)

    ident = ceip.AffineMap(scale=np.ones(2), shift=np.zeros(2))
    ll = ceip.affine_log_likelihood(ident, np.zeros(2))
    assert math.isclose(ll, -math.log(2.0 * math.pi), rel_tol=0, abs_tol=1e-12)

    with pytest.raises(ArithmeticError):
        ceip.AffineMap(scale=np.array([1.0, -1.0]), shift=np.zeros(2))


def test_flow_fit_recovers_affine_map():
    rng = np.random.default_rng(5)
    n = 2000
    us = np.full((n, 1), 0.5)
    actions = 2.0 * rng.standard_normal((n, 1)) + 1.0
    pairs = ceip.make_pairs(us, actions)

    spec = ceip.MlpSpec(1, [16], 1)
    flow = ceip.ConditionedAffineFlow(spec, spec, seed=3)
    cfg = ceip.TrainConfig()
    cfg.epochs = 120
    cfg.batch_size = 40
    cfg.seed = 11
    report = flow.fit(pairs, cfg)
    assert report.batches_fed > 0
    assert not report.aborted_nonfinite

    m = flow.effective_affine(np.array([0.5]))
    assert abs(m.scale[0] - 2.0) < 0.25
    assert abs(m.shift[0] - 1.0) < 0.15
    assert ceip.flow_nll(flow, pairs) < 2.5


def test_combination_injection_matches_base():
    spec = ceip.MlpSpec(2, [8], 2)
    bases = [ceip.ConditionedAffineFlow(spec, spec, seed=s) for s in (1, 2)]
    cf = ceip.CombinedFlow(bases, ceip.MlpSpec(2, [8], 4), seed=9)
    assert cf.n_flows == 2
    assert len(cf.base_digests()) == 2

    u = np.array([0.4, -0.2])
    mu, lam = cf.coefficients(u)
    assert mu.shape == (2,) and lam.shape == (2,)
    assert (mu > 0).all()

    cf.inject_coefficients(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    got = cf.effective_affine(u)
    want = bases[0].effective_affine(u)
    assert np.allclose(got.scale, want.scale, atol=1e-14)
    assert np.allclose(got.shift, want.shift, atol=1e-14)
    cf.clear_injection()
    assert not cf.injected


def test_retrieval_walks_forward():
    transitions = [
        ceip.TransitionTriple(
            s=np.array([0.0]), a=np.zeros(1), s_next=np.array([1.0]),
            traj_id=0, step_index=0,
        ),
        ceip.TransitionTriple(
            s=np.array([0.5]), a=np.zeros(1), s_next=np.array([2.0]),
            traj_id=0, step_index=1,
        ),
    ]
    db = ceip.RetrievalDatabase(transitions, penalty=1.0)
    assert db.size == 2 and db.state_dim == 1

    got = db.retrieve_next(np.array([0.0]))
    assert got.s_next[0] == 1.0 and db.markers[0] == 0
    assert db.retrieve_next(np.array([0.0])).s_next[0] == 2.0
    db.reset_episode()
    assert db.markers == [-1]

    nn = ceip.RetrievalDatabase(transitions, penalty=0.0)
    nn.retrieve_next(np.array([0.0]))
    assert nn.retrieve_next(np.array([0.0])).s_next[0] == 1.0

    u = ceip.make_condition(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert u.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_prior_bundle_step():
    spec = ceip.MlpSpec(3, [8], 2)
    base = ceip.ConditionedAffineFlow(spec, spec, seed=4)
    cf = ceip.CombinedFlow([base], ceip.MlpSpec(3, [4], 2), seed=6)
    bundle = ceip.PriorBundle(cf)
    s = np.array([0.1, -0.3, 0.2])
    z = np.array([0.5, -1.0])
    a = bundle.step(s, z)
    want = ceip.affine_forward(cf.effective_affine(s), z).clip(-1.0, 1.0)
    assert np.allclose(a, want, atol=1e-14)
    assert np.abs(a).max() <= 1.0


def test_seeds_and_variants():
    assert ceip.derive_seed(1234, "episode", 0) == ceip.derive_seed(
        1234, "episode", 0
    )
    assert ceip.derive_seed(1234, "episode", 0) != ceip.derive_seed(
        1234, "episode", 1
    )
    names = ceip.variant_names()
    for expected in ("CEIP", "CEIP+TS+EX+forward", "BC", "naive"):
        assert expected in names


def test_config_load_and_hash():
    cfg = ceip.ExperimentConfig.load(str(CONFIG_DIR / "point_reach.json"))
    assert cfg.env_kind == "point_reach"
    resolved = json.loads(cfg.json_text())
    assert resolved["rl"]["total_steps"] == 30000

    h = ceip.config_hash(cfg)
    assert len(h) == 16 and int(h, 16) >= 0
    cfg.variant = "naive"
    cfg.seeds = [0]
    cfg.out = "elsewhere"
    assert ceip.config_hash(cfg) == h


def test_micro_pipeline_run():
    cfg = ceip.ExperimentConfig.load(str(CONFIG_DIR / "waypoint.json"))
    cfg.variant = "BC"
    with tempfile.TemporaryDirectory(prefix="ceip-smoke-") as out:
        cfg.out = out
        outcomes = ceip.run_pipeline(cfg, seeds=[0], resume=False)
        assert len(outcomes) == 1
        run = outcomes[0]
        assert not run.reused
        assert run.rows and run.final_subtasks >= 0.0

        eval_csv = pathlib.Path(run.dir) / "eval.csv"
        first = eval_csv.read_text().splitlines()[0]
        assert first == "# config_hash=" + ceip.run_hash(cfg, "BC", 0)

        rerun = ceip.run_pipeline(cfg, seeds=[0], resume=True)[0]
        assert rerun.reused
        assert rerun.final_subtasks == run.final_subtasks


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
