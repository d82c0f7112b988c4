import csv
import json

import numpy as np
import pytest

from latte.data import make_cluster_dataset, save_dataset
from latte.errors import ConfigError, SimulationError
from latte.simulate import ExperimentConfig, Federation, comm_bytes, run, run_repeats

WORLD = {"calibrated": {"d": 3, "mu_norm": 0.8, "eps_pre": 0.2}}


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    rng = np.random.default_rng(7)
    ds = make_cluster_dataset(5, 16, 30, rng, noise=0.35, num_domains=2, domain_shift=0.6)
    return str(save_dataset(ds, tmp_path_factory.mktemp("ds")))


def bench(manifest, **kw):
    base = dict(mode="benchmark", data={"manifest": manifest}, clients_per_domain=3, params="cifar10c-latte", seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def theory(**kw):
    base = dict(mode="theory", world=WORLD, n_id=2, params={"preset": "theory-latte"}, samples_per_client=150, eval_size=2000)
    base.update(kw)
    return ExperimentConfig(**base)


def test_comm_bytes_examples():
    assert comm_bytes(100, 512, 5, 2) == (102400, 512000)
    assert sum(comm_bytes(100, 512, 5, 2)) == 614400
    assert comm_bytes(10, 8, 0, 2)[1] == 0
    u, d = comm_bytes(10, 8, 3, 4)
    assert comm_bytes(10, 16, 3, 4) == (2 * u, 2 * d)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="benchmark")
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="theory", world=WORLD)  # no samples_per_client
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"mode": "theory", "wrld": WORLD})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "bad.json")


def test_single_client_latte_equals_local_only():
    a = run(theory(n_id=1, policy="latte")).to_dict()
    b = run(theory(n_id=1, policy="local_only")).to_dict()
    assert a["comm"]["rounds"] > 0 and a["comm"]["download_bytes"] == 0
    for key in ("per_client", "per_domain", "total", "theory"):
        assert a[key] == b[key]


def test_global_shared_single_client_equals_local_only(manifest):
    cfg = dict(mode="theory", world=WORLD, n_id=1, params="theory-latte", samples_per_client=200, eval_size=1000)
    a = run(ExperimentConfig(**cfg, policy="global_shared")).to_dict()
    b = run(ExperimentConfig(**cfg, policy="local_only")).to_dict()
    a.pop("config"), b.pop("config")
    assert a == b


def test_global_shared_matches_concatenated_stream(manifest):
    fed = Federation(bench(manifest, clients_per_domain=2, policy="global_shared"))
    rep = fed.run()
    # oracle: one local-only client fed the round-robin merge of both domain-0 streams
    from latte.adapt import LatteClient

    streams = fed.streams
    solo = LatteClient(0, fed.classifier, fed.params, "local_only")
    correct = [0] * len(streams)
    for t in range(max(len(s.y) for s in streams)):
        for i, s in enumerate(streams):
            if t < len(s.y):
                correct[i] += int(solo.step(s.X[t]).label_final == s.y[t])
    assert [c["correct"] for c in rep.per_client] == correct


def test_comm_disabled_counts_nothing(manifest):
    rep = run(bench(manifest, params={"preset": "cifar10c-latte", "comm_period": None}))
    assert rep.comm["upload_bytes"] == rep.comm["download_bytes"] == rep.comm["rounds"] == 0


def test_zero_shot_policy_matches_argmax(manifest):
    rep = run(bench(manifest, policy="zero_shot"))
    assert rep.total["accuracy"] == rep.total["zero_shot_accuracy"]
    assert rep.comm["rounds"] == 0


def test_totals_and_bounds(manifest):
    rep = run(bench(manifest))
    assert rep.total["processed"] == 5 * 30 * 2
    assert rep.total["accuracy"] == rep.total["correct"] / rep.total["processed"]
    assert sum(c["processed"] for c in rep.per_client) == rep.total["processed"]
    for _, up, down in rep.round_log:
        assert up <= rep.comm["bound_upload"] and down <= rep.comm["bound_download"]


@pytest.mark.parametrize("interleaving", ["sequential", "round_robin"])
def test_reports_are_byte_identical(manifest, interleaving):
    a = run(bench(manifest, interleaving=interleaving)).to_json()
    assert a == run(bench(manifest, interleaving=interleaving)).to_json()


def test_thread_count_does_not_change_report(manifest):
    assert run(bench(manifest, workers=1)).to_json() == run(bench(manifest, workers=4)).to_json()


def test_period_counts_rounds(manifest):
    rep = run(bench(manifest, params={"preset": "cifar10c-latte", "comm_period": 7}))
    assert rep.comm["rounds"] == sum(c["processed"] // 7 for c in rep.per_client)


def test_trace_and_retrieval_log(manifest, tmp_path):
    rep = run(bench(manifest), trace=tmp_path / "t.csv", retrieval_log=tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert list(rows[0]) == ["client", "step", "pseudo_initial", "label_final", "true_label", "entropy_initial", "comm_round_flag"]
    assert len(rows) == rep.total["processed"]
    assert sum(int(r["comm_round_flag"]) for r in rows) == rep.comm["rounds"]
    assert sum(int(r["label_final"]) == int(r["true_label"]) for r in rows) == rep.total["correct"]
    log = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert list(log[0]) == ["downloader", "uploader", "class", "similarity"]
    assert all(r["downloader"] != r["uploader"] for r in log)


def test_theory_metrics_present():
    rep = run(theory(n_ood=1))
    th = rep.theory
    for key in ("eps_post", "eps_post_ci", "eps_pre", "eps_asym_frozen", "eps_asym_analytic", "memory_radius"):
        assert key in th
    assert th["eval_samples"] == 2 * 2000
    assert [c["group"] for c in th["per_client"]] == ["id", "id", "ood"]
    assert th["eps_asym_analytic"] < th["eps_pre"]


def test_failures_carry_client_and_step(tmp_path):
    rng = np.random.default_rng(0)
    ds = make_cluster_dataset(2, 4, 10, rng)
    save_dataset(ds, tmp_path)
    fed = Federation(ExperimentConfig(mode="benchmark", data={"manifest": str(tmp_path)}, clients_per_domain=2))
    fed.streams[1].X[3] = np.array([3.0, 0.0, 0.0, 0.0])  # not unit norm
    with pytest.raises(SimulationError) as e:
        fed.run()
    assert e.value.client == 1 and e.value.step == 3


def test_repeats_use_consecutive_seeds(manifest):
    out = run_repeats(bench(manifest, repeats=3))
    assert out["repeats"] == 3
    assert [r["config"]["seed"] for r in out["reports"]] == [3, 4, 5]
