import json
import os

import numpy as np
import pytest

from loreopt import cli
from loreopt.errors import ConfigError, InvalidMetric
from loreopt.harness import (
    SEED_ENV,
    cli_run,
    git_blob_sha1,
    load_config,
    log_grid_indices,
    packaged_config,
    parse_config,
    plotdata,
    read_csv_columns,
    recompute_summary,
    summarize,
)
from loreopt.linalg import read_matrix
from loreopt.oracles import QuadraticCE
from loreopt.projectors import LowRankProjector, ProjectorKind, fit_svd_projector

BASE = """\
oracle:
  kind: quadratic_ce
  n: 8
  r: 2
model:
  rank: 2
optimizer:
  eta: 0.05
  T: 40
  tau: 10
  beta1: 0.2
variants:
  galore: {schedule: galore}
  golore: {schedule: golore}
seeds: [0, 1, 2, 3, 4]
output_dir: out
"""


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


# --- configs ------------------------------------------------------------------

def test_packaged_configs_parse():
    cfg = load_config(packaged_config("minimal"))
    assert cfg.opt.T == 100 and cfg.seeds == [0] and len(cfg.variants) == 1
    fig = load_config("noisy_quadratic")
    assert fig.oracle == {"kind": "quadratic_ce", "n": 16, "r": 4, "sigma": 1.0, "seed": 0}
    assert {v.opt.T for v in fig.variants} == {20000}
    assert len(fig.variants) == 8 and fig.seeds == [0, 1, 2, 3, 4]


def test_variants_override_base():
    cfg = parse_config(BASE)
    assert [v.name for v in cfg.variants] == ["galore", "golore"]
    assert cfg.variants[1].opt.schedule.value == "golore"
    assert cfg.variants[0].opt.eta == 0.05 and cfg.variants[0].rank == 2


def _error_line(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text, path="exp.yaml")
    return info.value


def test_config_errors_are_line_precise():
    err = _error_line(BASE.replace("  tau: 10\n", "  tau: 10\n  gamma: 3\n"))
    assert err.line == 11 and "gamma" in str(err) and str(err).startswith("exp.yaml:11:")
    err = _error_line(BASE.replace("eta: 0.05", "eta: -1"))
    assert err.line == 8 and "eta" in str(err)
    err = _error_line(BASE.replace("golore: {schedule: golore}", "golore: {schedule: golore, beta1: 2}"))
    assert err.line == 14
    err = _error_line(BASE.replace("kind: quadratic_ce", "kind: cubic"))
    assert err.line == 2
    err = _error_line(BASE.replace("seeds: [0, 1, 2, 3, 4]", "seeds: []"))
    assert err.line == 15
    err = _error_line(BASE + "extra: 1\n")
    assert err.line == 17
    err = _error_line(BASE.replace("  T: 40\n", "  T: [40\n"))
    assert err.line is not None and "syntax" in str(err)
    err = _error_line(BASE.replace("  n: 8\n", "  n: 8\n  n: 9\n"))
    assert err.line == 4 and "duplicate" in str(err)
    err = _error_line(BASE.replace("  rank: 2\n", "  rank: 2\n  width: 2\n"))
    assert err.line == 7
    err = _error_line(BASE.replace("golore: {schedule: golore}", "golore: {schedule: gosare}"))
    assert "model.k" in str(err)
    err = _error_line(BASE.replace("T: 40", "T: 40.5"))
    assert err.line == 9 and "integer" in str(err)
    err = _error_line(BASE.replace("  r: 2\n", "  r: 9\n"))
    assert "invalid oracle" in str(err)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "11, 12")
    assert parse_config(BASE).seeds == [11, 12]
    assert parse_config(BASE, env_seeds=False).seeds == [0, 1, 2, 3, 4]
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        parse_config(BASE)


# --- running ------------------------------------------------------------------

def test_minimal_config_rows_and_determinism(tmp_path):
    cfg = load_config(packaged_config("minimal"))
    a = cli_run(cfg, tmp_path / "a")
    b = cli_run(cfg, tmp_path / "b")
    assert len(a) == 1
    csv_a = (tmp_path / "a" / a[0].csv_path).read_bytes()
    csv_b = (tmp_path / "b" / b[0].csv_path).read_bytes()
    assert csv_a == csv_b
    assert csv_a.count(b"\n") == 101 and b"\r" not in csv_a
    assert csv_a.decode("utf-8").splitlines()[0] == "t,loss,grad_norm_sq,refreshed,projector_kind"
    assert a[0].content_hash == b[0].content_hash and a[0].config_hash == b[0].config_hash
    rec_a = json.loads((tmp_path / "a" / "default" / "seed_0.json").read_text())
    rec_b = json.loads((tmp_path / "b" / "default" / "seed_0.json").read_text())
    rec_a.pop("wall_time"), rec_b.pop("wall_time")
    assert rec_a == rec_b


def test_records_and_persisted_oracle(tmp_path):
    cfg = parse_config(BASE)
    records = cli_run(cfg, tmp_path)
    assert len(records) == 10
    D = read_matrix(tmp_path / "quadratic_ce_D.bin")
    np.testing.assert_array_equal(D, QuadraticCE(n=8, r=2).D)
    for rec in records:
        path = tmp_path / rec.variant / f"seed_{rec.seed}.json"
        assert recompute_summary(path) == rec.summary
        cols = read_csv_columns(tmp_path / rec.csv_path)
        assert float(cols["loss"][-1]) == rec.summary["final_loss"]
        assert len(cols["t"]) == 40
    hashes = {r.content_hash for r in records}
    assert len(hashes) == 10
    assert {r.config_hash for r in records if r.variant == "galore"} != \
        {r.config_hash for r in records if r.variant == "golore"}


def test_content_hash_is_git_blob_sha1():
    # the empty blob hash git itself reports
    assert git_blob_sha1(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_summarize_definition():
    s = summarize(["1.0", "0.5", "0.25"], [5, 4, 3, 2, 1, 1, 1, 1, 1, 0.5][:3])
    assert s == {"final_loss": 0.25, "min_grad_norm_sq": 3.0, "mean_grad_norm_sq_last10": 3.0}
    grads = list(range(20, 0, -1))
    s = summarize([0] * 20, grads)
    assert s["mean_grad_norm_sq_last10"] == 1.5


def test_relora_engine_config(tmp_path):
    text = BASE.replace("output_dir: out\n", "output_dir: out\nengine: relora\n").replace(
        "seeds: [0, 1, 2, 3, 4]", "seeds: [0]")
    sub = cli_run(parse_config(BASE.replace("seeds: [0, 1, 2, 3, 4]", "seeds: [0]")), tmp_path / "s")
    fac = cli_run(parse_config(text), tmp_path / "f")
    for a, b in zip(sub, fac):
        la = np.array(read_csv_columns(tmp_path / "s" / a.csv_path)["loss"], dtype=float)
        lb = np.array(read_csv_columns(tmp_path / "f" / b.csv_path)["loss"], dtype=float)
        np.testing.assert_allclose(la, lb, rtol=1e-10, atol=1e-10)
        assert a.config_hash != b.config_hash


# --- plot data -------------------------------------------------------------------

@pytest.fixture
def results(tmp_path):
    cli_run(parse_config(BASE), tmp_path)
    return tmp_path


def test_plotdata_passthrough(tmp_path):
    text = BASE.replace("seeds: [0, 1, 2, 3, 4]", "seeds: [7]").replace(
        "  golore: {schedule: golore}\n", "")
    recs = cli_run(parse_config(text), tmp_path)
    table = plotdata(tmp_path, "grad_norm_sq").splitlines()
    assert table[0] == "algorithm,seed,t,value"
    cols = read_csv_columns(tmp_path / recs[0].csv_path)
    assert table[1:] == [f"galore,7,{t},{v}" for t, v in zip(cols["t"], cols["grad_norm_sq"])]


def test_plotdata_median_and_grid(results):
    table = plotdata(results, "loss", median=True).splitlines()
    assert len(table) == 1 + 2 * 40
    rows = [r.split(",") for r in table[1:]]
    assert {r[1] for r in rows} == {"median"}
    vals = [float(read_csv_columns(results / "golore" / f"seed_{s}.csv")["loss"][5]) for s in range(5)]
    golore_t5 = next(r for r in rows if r[0] == "golore" and r[2] == "5")
    assert float(golore_t5[3]) == np.median(vals)
    grid = plotdata(results, "loss", log_grid=7.5).splitlines()
    assert len(grid) == 1 + 10 * 8
    tsv = plotdata(results, "loss", median=True, log_grid=5, sep="\t").splitlines()
    assert len(tsv) == 1 + 2 * 5 and tsv[0] == "algorithm\tseed\tt\tvalue"
    with pytest.raises(InvalidMetric):
        plotdata(results, "accuracy")


def test_log_grid_indices():
    idx = log_grid_indices(100, 10)
    assert len(idx) == 10 and idx[0] == 0 and idx[-1] == 99
    assert np.all(np.diff(idx) > 0)
    assert len(log_grid_indices(5, 9)) == 5
    assert list(log_grid_indices(3, 3)) == [0, 1, 2]


# --- command line -----------------------------------------------------------------

def test_cli_run_and_plotdata(tmp_path, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(BASE.replace("seeds: [0, 1, 2, 3, 4]", "seeds: [0, 1]"))
    assert cli.main(["run", str(cfg), "--output-dir", str(tmp_path / "o"), "--quiet"]) == 0
    out = capsys.readouterr().out
    assert out.count("seed=") == 4
    dest = tmp_path / "table.csv"
    assert cli.main(["plotdata", str(tmp_path / "o"), "--metric", "loss", "--median", "-o", str(dest)]) == 0
    assert dest.read_text().splitlines()[0] == "algorithm,seed,t,value"
    assert cli.main(["plotdata", str(tmp_path / "o"), "--metric", "nope"]) == 2
    assert "nope" in capsys.readouterr().err


def test_cli_env_seed(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(BASE)
    monkeypatch.setenv(SEED_ENV, "42")
    assert cli.main(["run", str(cfg), "--output-dir", str(tmp_path / "o"), "--quiet"]) == 0
    assert sorted(p.name for p in (tmp_path / "o" / "galore").iterdir()) == ["seed_42.csv", "seed_42.json"]


def test_cli_config_error_exit(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(BASE.replace("eta: 0.05", "eta: zero"))
    assert cli.main(["run", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert f"{cfg}:8:" in err


def test_cli_divergence_exit(tmp_path, capsys):
    cfg = tmp_path / "hot.yaml"
    cfg.write_text(BASE.replace("eta: 0.05", "eta: 500.0").replace("beta1: 0.2", "beta1: 1.0")
                   .replace("T: 40", "T: 400").replace("seeds: [0, 1, 2, 3, 4]", "seeds: [0]")
                   .replace("  galore: {schedule: galore}\n", "").replace("{schedule: golore}",
                                                                          "{schedule: full}"))
    assert cli.main(["run", str(cfg), "--output-dir", str(tmp_path / "o"), "--quiet"]) == 1
    assert "diverged" in capsys.readouterr().err
    rec = json.loads((tmp_path / "o" / "golore" / "seed_0.json").read_text())
    assert rec["diverged"] and rec["divergence_step"] is not None


def test_cli_hparams_and_cost(capsys):
    assert cli.main(["hparams", "large_batch", "--L", "1", "--Delta", "1", "--sigma", "1",
                     "--delta", "1", "--T", "10000", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["B"] == 101 and data["tau"] == 2155
    assert cli.main(["hparams", "deterministic", "--L", "1", "--Delta", "1", "--sigma", "0",
                     "--delta", "0.25", "--T", "1000"]) == 0
    text = capsys.readouterr().out
    rows = dict(line.split(None, 1) for line in text.splitlines())
    assert rows["tau"] == "86" and rows["beta1"] == "1.0" and "B" not in rows
    assert cli.main(["hparams", "golore", "--L", "1", "--Delta", "1", "--sigma", "1",
                     "--delta", "1", "--T", "10"]) == 2
    assert "T=10" in capsys.readouterr().err
    assert cli.main(["cost", "--m", "4", "--n", "8", "--r", "2", "--b", "1", "--json"]) == 0
    assert json.loads(capsys.readouterr().out) == {"impl": "original", "memory": 60, "computation": 560}
    assert cli.main(["cost", "--m", "4", "--n", "8", "--r", "2", "--b", "1", "--impl", "relora"]) == 0
    assert "memory       78" in capsys.readouterr().out
    assert cli.main(["cost", "--m", "9", "--n", "8", "--r", "2", "--b", "1"]) == 2


def test_cli_verify_quick(capsys):
    assert cli.main(["verify", "--trials", "100"]) == 0
    out = capsys.readouterr().out
    for name in ("quadratic_ce", "svd_trap", "sparse_trap", "random_quadratic", "lemmas"):
        assert f"[{name}]" in out
    assert "FAIL" not in out


def test_cli_verify_fault_injection(tmp_path, capsys):
    def broken(G, r, side=None):
        good = fit_svd_projector(G, min(np.shape(G)), side)
        return LowRankProjector(good.factor[:, -r:], good.side, ProjectorKind.SVD)

    code = cli.cli_verify(trials=200, svd_projector=broken, artifact_dir=tmp_path)
    err = capsys.readouterr().err
    assert code == 1
    assert "svd projection error bound" in err
    assert (tmp_path / "lemma_report.json").exists()


def test_module_entry_point():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "loreopt", "cost", "--m", "2", "--n", "3", "--r", "1",
                          "--b", "1", "--json"], capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["memory"] == 2 * 3 + 2 + 3 + 2
