"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at
the end of the session lists the verdicts.  Criteria 6-8 train real models
on the desk-scale synthetic dataset and take a few minutes in total.
"""

import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from brati import autodiff as ad
from brati import layers as L
from brati.cli import main
from brati.data import DatasetContainer, read_container, write_container
from brati.evaluation import MetricsReport, metric_mae, metric_mre, metric_rmse, validate_report
from brati.gradcheck import run_suite
from brati.masking import draw_sequences, generate_mcar, target_count
from brati.model import BratiConfig, BratiParams, brati_forward, parameter_count
from brati.objective import LossWeights, consistency_loss, masked_mae, orl_loss, total_loss
from brati.trainer import load_checkpoint, noam_lr, save_checkpoint

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"
N_CASES = 100
ORACLE_TOL = 1e-10


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    """Synthetic container, 4 features x 4800 rows, T = 24, masked MCAR 20% on val/test."""
    root = tmp_path_factory.mktemp("desk") / "data"
    assert main(["synth", "--out", str(root), "--features", "4", "--rows", "4800", "--T", "24", "--seed", "0"]) == 0
    assert main(["mask", "--data", str(root), "--scenario", "mcar", "--rate", "0.2", "--seed", "1"]) == 0
    return root


# ----------------------------------------------------------------------
def test_criterion_1_gradient_correctness(verdict):
    errors, seconds = run_suite(seed=0)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    detail = f"max relative error {worst:.2e} ({worst_name}) over {len(errors)} cases in {seconds:.1f}s (need < 1e-3, < 60s)"
    verdict(1, worst < 1e-3 and seconds < 60.0, detail)


# ----------------------------------------------------------------------
def _gru_case(rng):
    d_in, d_h, T = (int(v) for v in rng.integers(1, 6, 3))
    p = L.GruParams.init(d_in, d_h, rng)
    for _, t in p.named_tensors():
        t.data = rng.uniform(-1, 1, t.shape)
    x, h0 = rng.uniform(-2, 2, (T, d_in)), rng.uniform(-1, 1, d_h)
    W = {k: getattr(p, "W_" + k).data.tolist() for k in ("ir", "iz", "in", "hr", "hz", "hn")}
    b = {k: getattr(p, "b_" + k).data.tolist() for k in ("ir", "iz", "in", "hr", "hz", "hn")}
    return np.abs(L.gru_forward(x, p, h0).data - np.array(oracles.gru(x.tolist(), W, b, h0.tolist()))).max()


def _loss_case(rng, which):
    shape = tuple(int(v) for v in rng.integers(1, 6, 2))
    x, fwd, bwd, joint = (rng.normal(size=shape) for _ in range(4))
    m = (rng.random(shape) > 0.4).astype(float)
    m.flat[rng.integers(m.size)] = 1.0
    if which == "masked_mae":
        return abs(float(masked_mae(joint, x, m).data) - oracles.masked_mae(joint, x, m))
    if which == "orl":
        return abs(float(orl_loss(joint, fwd, bwd, x, m).data) - oracles.orl(joint, fwd, bwd, x, m))
    if which == "consistency":
        return abs(float(consistency_loss(fwd, bwd, 0.1).data) - oracles.consistency(fwd, bwd, 0.1))
    parts = rng.uniform(0, 3, 3)
    weights = rng.uniform(0, 2, 3)
    got = total_loss(*(ad.Tensor(v) for v in parts), LossWeights(*weights, rho=0.1)).total
    return abs(float(got.data) - oracles.total(*parts, *weights))


def _metric_case(rng, index):
    shape = tuple(int(v) for v in rng.integers(1, 6, 3))
    imp, tgt = rng.normal(size=shape), rng.normal(size=shape)
    ind = (rng.random(shape) > 0.5).astype(float)
    ind.flat[rng.integers(ind.size)] = 1.0
    got = (metric_mae, metric_rmse, metric_mre)[index](imp, tgt, ind)
    return abs(got - oracles.metrics(imp, tgt, ind)[index])


def _pe_case(rng):
    T, half = int(rng.integers(1, 30)), int(rng.integers(1, 9))
    return np.abs(L.positional_encoding(T, 2 * half).data - np.array(oracles.positional_encoding(T, 2 * half))).max()


def _noam_case(rng):
    step, d_model, warmup = int(rng.integers(1, 10**6)), int(rng.choice([4, 16, 64, 128, 512])), int(rng.integers(1, 10**4))
    return abs(noam_lr(step, d_model, warmup) - oracles.noam(step, d_model, warmup))


ORACLE_CASES = {
    "masked_mae": lambda rng: _loss_case(rng, "masked_mae"),
    "orl": lambda rng: _loss_case(rng, "orl"),
    "consistency": lambda rng: _loss_case(rng, "consistency"),
    "total_loss": lambda rng: _loss_case(rng, "total"),
    "metric_mae": lambda rng: _metric_case(rng, 0),
    "metric_rmse": lambda rng: _metric_case(rng, 1),
    "metric_mre": lambda rng: _metric_case(rng, 2),
    "gru": _gru_case,
    "positional_encoding": _pe_case,
    "noam_lr": _noam_case,
}


@pytest.mark.parametrize("name", list(ORACLE_CASES))
def test_criterion_2_equation_oracles(verdict, name):
    rng = np.random.default_rng(sorted(ORACLE_CASES).index(name))
    worst = max(ORACLE_CASES[name](rng) for _ in range(N_CASES))
    verdict(2, worst <= ORACLE_TOL, f"{name}: max |impl - oracle| = {worst:.1e} over {N_CASES} cases (need <= 1e-10)")


# ----------------------------------------------------------------------
def test_criterion_3_scheduler_point_check(verdict):
    got = noam_lr(4000, 512, 4000)
    closed = 512 ** -0.5 * 4000 ** -0.5
    steps = np.arange(1, 12001)
    peak = int(steps[np.argmax([noam_lr(int(s), 512, 4000) for s in steps])])
    ok = abs(got - closed) <= 1e-12 and peak == 4000
    verdict(3, ok, f"noam_lr(4000, 512, 4000) = {got:.6e}, |diff| = {abs(got - closed):.1e}; argmax over 1..12000 = {peak}")


# ----------------------------------------------------------------------
def test_criterion_4_masking_audit(verdict):
    mask = np.ones((500, 5))
    problems = []
    for rate in (0.1, 0.2):
        target = target_count(mask, rate)
        for seed in range(5):
            ind = generate_mcar(mask, rate, seed)
            if ind.sum() != target:
                problems.append(f"mcar rate {rate} seed {seed}: {ind.sum()} != {target}")
            if not np.array_equal(ind, generate_mcar(mask, rate, seed)):
                problems.append(f"mcar rate {rate} seed {seed}: not deterministic")
            for name, lengths in (("fixed5", (5, 5)), ("rand3-10", (3, 10))):
                draw = draw_sequences(mask, rate, seed, lengths)
                again = draw_sequences(mask, rate, seed, lengths)
                run_lengths = [n for _, _, n in draw.runs]
                if draw.indicating.sum() != target:
                    problems.append(f"{name} rate {rate} seed {seed}: count {draw.indicating.sum()} != {target}")
                if not np.array_equal(draw.indicating, again.indicating):
                    problems.append(f"{name} rate {rate} seed {seed}: not deterministic")
                recon = np.zeros_like(mask)
                for col, start, n in draw.runs:
                    recon[start:start + n, col] += 1
                for row, col in draw.fallback:
                    recon[row, col] += 1
                if not np.array_equal(recon, draw.indicating):
                    problems.append(f"{name} rate {rate} seed {seed}: runs overlap or do not cover I")
                if name == "fixed5" and any(n != 5 for n in run_lengths):
                    problems.append(f"fixed5 rate {rate} seed {seed}: run lengths {sorted(set(run_lengths))}")
                if name == "rand3-10" and sum(not 3 <= n <= 10 for n in run_lengths) > 1:
                    problems.append(f"rand3-10 rate {rate} seed {seed}: more than one out-of-range run")
    detail = "500x5 table, 3 scenarios x 2 rates x 5 seeds: counts exact, run lengths valid, seeded"
    verdict(4, not problems, detail if not problems else "; ".join(problems[:3]))


# ----------------------------------------------------------------------
def test_criterion_5_model_contracts(verdict):
    rng = np.random.default_rng(5)
    failures = []
    cases = 0
    for variant in ("full", "single_block", "average_combine"):
        cfg = BratiConfig(D=3, T=8, d_model=8, d_ffn=16, heads=2, variant=variant)
        for seed in range(4):
            params = BratiParams.init(cfg, seed=seed)
            n = 84 if variant == "full" else 83
            m = (rng.random((n, 8, 3)) > rng.uniform(0, 1, (n, 1, 1))).astype(float)
            x = np.where(m == 1, rng.normal(scale=rng.uniform(0.1, 10), size=m.shape), 0.0)
            out = brati_forward(x, m, params, cfg).imputed.data
            cases += n
            if not np.array_equal(out * m, x * m):
                failures.append(f"pass-through broken for {variant}")
    if cases < 1000:
        failures.append(f"only {cases} pass-through cases")

    full_cfg = BratiConfig(D=3, T=8, d_model=8, d_ffn=16, heads=2)
    avg_cfg = BratiConfig(D=3, T=8, d_model=8, d_ffn=16, heads=2, variant="average_combine")
    full, avg = BratiParams.init(full_cfg, seed=11), BratiParams.init(avg_cfg, seed=11)
    full.W_omega.data[:] = 0.0
    full.b_omega.data[:] = 0.0
    m = (rng.random((16, 8, 3)) > 0.3).astype(float)
    x = np.where(m == 1, rng.normal(size=m.shape), 0.0)
    a, b = brati_forward(x, m, full, full_cfg), brati_forward(x, m, avg, avg_cfg)
    if not all(np.array_equal(getattr(a, f).data, getattr(b, f).data) for f in ("x_fwd", "x_bwd", "x_joint", "imputed")):
        failures.append("full with zero combination weights differs from average_combine")

    for v in ("full", "single_block", "average_combine"):
        cfg = BratiConfig(D=2, T=4, d_model=4, d_ffn=8, heads=1, variant=v)
        if parameter_count(cfg) != oracles.brati_parameter_count(2, 4, 4, 8, 1, 1, True, v):
            failures.append(f"parameter count mismatch for {v}")
    names = set(BratiParams.init(BratiConfig(D=2, T=4, d_model=4, d_ffn=8, heads=1, variant="single_block")).named())
    if any(n.startswith(("bwd.", "W_omega", "b_omega")) for n in names):
        failures.append("single_block keeps backward or combination parameters")

    detail = f"pass-through exact on {cases} windows; zero-W_omega full == average_combine bitwise; enumeration oracle agrees"
    verdict(5, not failures, detail if not failures else "; ".join(failures))


# ----------------------------------------------------------------------
def _report(path):
    return json.loads(Path(path).read_text())


@pytest.mark.slow
def test_criterion_6_desk_learning(verdict, desk_data, tmp_path):
    start = time.perf_counter()
    run = tmp_path / "run"
    assert main(["train", "--config", str(DESK_CONFIG), "--data", str(desk_data), "--out", str(run)]) == 0
    test = str(desk_data / "test")
    assert main(["evaluate", "--ckpt", str(run / "checkpoint.bin"), "--data", test, "--report", str(tmp_path / "m.json")]) == 0
    assert main(["evaluate", "--baseline", "median", "--data", test, "--report", str(tmp_path / "med.json")]) == 0
    assert main(["evaluate", "--baseline", "locf", "--data", test, "--report", str(tmp_path / "locf.json")]) == 0
    seconds = time.perf_counter() - start
    model, med, locf = (_report(tmp_path / f) for f in ("m.json", "med.json", "locf.json"))
    same_mask = model["mask_sha256"] == med["mask_sha256"] == locf["mask_sha256"]
    gain = 1.0 - model["mae"] / locf["mae"]
    ok = same_mask and model["mae"] < med["mae"] and model["mae"] < locf["mae"] and gain >= 0.20 and seconds < 900
    detail = (f"test MAE model {model['mae']:.4f}, median {med['mae']:.4f}, LOCF {locf['mae']:.4f} "
              f"({100 * gain:.1f}% below LOCF, need >= 20%); {seconds:.0f}s (need < 900s)")
    verdict(6, ok, detail)


@pytest.mark.slow
def test_criterion_7_ablation_ordering(verdict, desk_data, tmp_path):
    out = tmp_path / "ablation"
    assert main(["ablate", "--config", str(DESK_CONFIG), "--data", str(desk_data), "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    mae = {(r["scenario"], r["model"]): float(r["mae"]) for r in rows}
    scenarios = sorted({r["scenario"] for r in rows})
    shared = all(len({r["mask_sha256"] for r in rows if r["scenario"] == s}) == 1 for s in scenarios)
    full = mae[("rand3-10", "brati-full")]
    single = mae[("rand3-10", "brati-single_block")]
    average = mae[("rand3-10", "brati-average_combine")]
    ok = (scenarios == ["fixed5", "mcar", "rand3-10"] and shared
          and full <= single * 1.05 and full <= average * 1.05)
    summary = ", ".join(f"{s}: full {mae[(s, 'brati-full')]:.4f} / single {mae[(s, 'brati-single_block')]:.4f} "
                        f"/ avg {mae[(s, 'brati-average_combine')]:.4f}" for s in scenarios)
    verdict(7, ok, f"rand3-10 full {full:.4f} vs single_block {single:.4f}, average_combine {average:.4f} "
                   f"(5% slack); masks shared per scenario: {shared}. {summary}")


@pytest.mark.slow
def test_criterion_8_determinism(verdict, desk_data, tmp_path):
    cfg = json.loads(DESK_CONFIG.read_text())
    cfg["model"]["dropout"] = 0.1
    cfg["train"]["max_epochs"] = 4
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert main(["train", "--config", str(path), "--data", str(desk_data), "--out", str(tmp_path / name),
                     "--no-figures"]) == 0
    files = ("checkpoint.bin", "train_report.json", "train_log.jsonl")
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    verdict(8, all(same.values()), "two train runs (dropout 0.1, 4 epochs): " +
            ", ".join(f"{f} {'identical' if s else 'DIFFERENT'}" for f, s in same.items()))


def test_criterion_9_round_trips(verdict, desk_data, tmp_path):
    failures = []
    cfg = BratiConfig(D=4, T=24, d_model=16, d_ffn=32, heads=2)
    params = BratiParams.init(cfg, seed=9)
    save_checkpoint(params, cfg, tmp_path / "a.bin")
    loaded, loaded_cfg = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(loaded, loaded_cfg, tmp_path / "b.bin")
    if loaded_cfg != cfg or any(not np.array_equal(loaded.arrays()[k], v) for k, v in params.arrays().items()):
        failures.append("checkpoint values changed")
    if (tmp_path / "a.bin").read_bytes() != (tmp_path / "b.bin").read_bytes():
        failures.append("checkpoint bytes changed")

    rng = np.random.default_rng(9)
    values = rng.normal(size=(5, 24, 4)) * 10.0 ** rng.integers(-12, 12, (5, 24, 4))
    values[rng.random(values.shape) < 0.15] = np.nan
    ind = ((rng.random(values.shape) < 0.2) & ~np.isnan(values)).astype(float)
    container = DatasetContainer(values, ind, {"split": "test", "scenario": "mcar", "rate": 0.2, "seed": 3})
    write_container(tmp_path / "c", container)
    back = read_container(tmp_path / "c")
    if not (np.array_equal(back.values, values, equal_nan=True) and np.array_equal(back.indicating, ind)):
        failures.append("container values changed")
    desk = read_container(desk_data / "test")
    write_container(tmp_path / "d", desk)
    if not np.array_equal(read_container(tmp_path / "d").values, desk.values, equal_nan=True):
        failures.append("desk container changed")

    report_path = tmp_path / "r.json"
    assert main(["evaluate", "--baseline", "median", "--data", str(desk_data / "test"), "--report", str(report_path)]) == 0
    try:
        report = _report(report_path)
        validate_report(report)
        if MetricsReport.from_json(report_path.read_text()).to_json() != report_path.read_text():
            failures.append("report JSON not lossless")
    except Exception as exc:  # noqa: BLE001 - any failure is a verdict
        failures.append(f"report invalid: {exc}")
    verdict(9, not failures, "checkpoint bytes + values, container (NaN, 1e-12..1e12 magnitudes), report schema"
            if not failures else "; ".join(failures))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
