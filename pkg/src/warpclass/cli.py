"""Command-line pipeline: simulate | fit | predict | register | evaluate.

Artifacts are deterministic for a given seed: JSON is written with
sorted keys, CSV floats use shortest round-trip formatting, and wall
clock timings only appear when asked for.  Exit codes: 0 success, 2
usage, 3 data validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .classify import (
    ClassifierModel,
    cross_validate_K,
    fit_classifier,
    predict_new,
)
from .config import RunConfig, load_config
from .curves import (
    CurvePanel,
    ScalarRecord,
    SubjectCurve,
    join_panel,
    load_curves,
    load_scalars,
    save_curves,
    save_scalars,
)
from .errors import DataError, NumericalError
from .registration import RegistrationFit, align_curves, fit_registration
from .simeval import (
    MetricsReport,
    Study1Config,
    Study2Config,
    metric_ari,
    metric_ca,
    metric_rand,
    simulate_study1,
    simulate_study2,
    study1_beta,
    warp_imse,
)

FORMAT_VERSION = 1
PREDICTIONS_HEADER = ["subject_id", "pi_hat", "label", "iterations", "converged"]


def _write_json(path: Path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_panel(curves_path, scalars_path) -> CurvePanel:
    for p in (curves_path, scalars_path):
        if not Path(p).exists():
            raise DataError(f"file not found: {p}")
    return join_panel(load_curves(curves_path), load_scalars(scalars_path))


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.study == 1:
        if args.scenario is not None:
            raise UsageError("--scenario applies to study 2 only")
        cfg = Study1Config(
            n_subjects=args.n_subjects or 80,
            n_obs=args.n_obs or 100,
            seed=args.seed,
        )
        panel, truth = simulate_study1(cfg)
        study_payload = {
            "study": 1,
            "config": {
                "n_subjects": cfg.n_subjects,
                "n_obs": cfg.n_obs,
                "sigma": cfg.sigma,
                "sigma_r": cfg.sigma_r,
                "sigma_w": cfg.sigma_w,
                "b0": cfg.b0,
                "b1": cfg.b1,
                "seed": cfg.seed,
            },
        }
        grid = panel.curves[0].times
        study_payload["beta_grids"] = {
            "t": grid.tolist(),
            "beta1": study1_beta(0, grid).tolist(),
            "beta2": study1_beta(1, grid).tolist(),
        }
    else:
        if args.scenario is None:
            raise UsageError("--scenario A|B is required for study 2")
        cfg = Study2Config(
            scenario=args.scenario,
            seed=args.seed,
            n_subjects=args.n_subjects or 120,
            n_obs=args.n_obs or 100,
        )
        panel, truth = simulate_study2(cfg)
        study_payload = {
            "study": 2,
            "scenario": cfg.scenario,
            "config": {
                "n_subjects": cfg.n_subjects,
                "n_obs": cfg.n_obs,
                "delta1": cfg.value("delta1"),
                "delta2": cfg.value("delta2"),
                "sigma": cfg.value("sigma"),
                "sigma_r": cfg.value("sigma_r"),
                "sigma_w": cfg.value("sigma_w"),
                "seed": cfg.seed,
            },
        }

    subjects = panel.subject_ids
    payload = {
        "format_version": FORMAT_VERSION,
        "subjects": subjects,
        "labels": truth.labels.tolist(),
        "groups": truth.groups.tolist(),
        "v": truth.v.tolist(),
        "eta": None if truth.eta is None else truth.eta.tolist(),
        "train_mask": None if truth.train_mask is None else truth.train_mask.tolist(),
        "anchors": truth.anchors.tolist(),
        "warp_offsets": {sid: truth.warp_offsets[sid].tolist() for sid in subjects},
        "b0": truth.b0,
        "b1": truth.b1,
    }
    payload.update(study_payload)

    save_curves(out / "curves.csv", panel.curves)
    save_scalars(out / "scalars.csv", panel.scalars)
    _write_json(out / "truth.json", payload)

    if args.split_files:
        if truth.train_mask is None:
            raise UsageError("--split-files requires a study with a train/test split")
        for tag, keep in (("train", truth.train_mask), ("test", ~truth.train_mask)):
            ids = [sid for sid, k in zip(subjects, keep) if k]
            sub = panel.subset(ids)
            save_curves(out / f"curves_{tag}.csv", sub.curves)
            save_scalars(out / f"scalars_{tag}.csv", sub.scalars)
    return 0


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.threads is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "threads": args.threads})
    panel = _load_panel(args.curves, args.scalars)
    if not panel.has_labels:
        raise DataError("fitting requires a label for every subject")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    # thread count never changes results, so it stays out of the artifacts
    provenance = {k: v for k, v in cfg.to_dict().items() if k != "threads"}

    t0 = time.perf_counter()
    reg_fit = fit_registration(panel, cfg.registration())
    timings["registration_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cv_table = None
    if cfg.k_x is not None:
        k_x, k_e = cfg.k_x, cfg.k_e
        chosen_by = "config"
    else:
        (k_x, k_e), cv_table = cross_validate_K(
            reg_fit,
            panel,
            pairs=cfg.cv_grid,
            n_folds=cfg.cv_folds,
            seed=cfg.seed,
            return_table=True,
        )
        chosen_by = "cv"
    model = fit_classifier(
        reg_fit, panel, k_x, k_e, smoothing_window=cfg.smoothing_window
    )
    timings["classifier_s"] = time.perf_counter() - t0

    _write_json(
        out / "registration.json",
        {
            "format_version": FORMAT_VERSION,
            "kind": "registration",
            "fit": reg_fit.to_dict(),
            "run_config": provenance,
        },
    )
    _write_json(
        out / "classifier.json",
        {
            "format_version": FORMAT_VERSION,
            "kind": "classifier",
            "k_x": k_x,
            "k_e": k_e,
            "model": model.to_dict(),
            "run_config": provenance,
        },
    )
    report = {
        "format_version": FORMAT_VERSION,
        "kind": "fit_report",
        "registration": {
            "converged": reg_fit.converged,
            "n_outer": reg_fit.n_outer,
            "trace_phases": reg_fit.trace_phases,
            "warp_opt_converged_fraction": reg_fit.warp_opt_converged_fraction,
            "noise_sd": reg_fit.var.noise_sd,
        },
        "classifier": {
            "k_x": k_x,
            "k_e": k_e,
            "chosen_by": chosen_by,
            "cv_table": None
            if cv_table is None
            else [[list(pair), dev, n] for pair, dev, n in cv_table],
            "converged": model.converged,
            "n_passes": model.n_passes,
            "sigma_e": model.sigma_e,
        },
        "run_config": provenance,
    }
    if args.timings:
        report["timings"] = timings
    _write_json(out / "fit_report.json", report)
    return 0


def _load_fit(fit_dir) -> tuple[RegistrationFit, ClassifierModel]:
    fit_dir = Path(fit_dir)
    reg_payload = _read_json(fit_dir / "registration.json")
    cls_payload = _read_json(fit_dir / "classifier.json")
    reg_fit = RegistrationFit.from_dict(reg_payload["fit"])
    model = ClassifierModel.from_dict(cls_payload["model"])
    return reg_fit, model


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    reg_fit, model = _load_fit(args.fit)
    if not Path(args.curves).exists():
        raise DataError(f"file not found: {args.curves}")
    curves = load_curves(args.curves)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not curves:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(PREDICTIONS_HEADER)
        return 0
    scalars = load_scalars(args.scalars)
    panel = join_panel(curves, scalars)

    threads = args.threads or 1

    def one(i_sid):
        i, sid = i_sid
        return predict_new(
            reg_fit, model, panel.curve(sid), panel.covariates[i], args.max_iter
        )

    items = list(enumerate(panel.subject_ids))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]

    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTIONS_HEADER)
        for res in results:
            writer.writerow(
                [
                    res.subject_id,
                    _fmt(res.pi_hat),
                    res.label,
                    res.iterations,
                    int(res.converged),
                ]
            )
    return 0


# ---------------------------------------------------------------------------
# register


def cmd_register(args) -> int:
    reg_fit = _load_registration_only(args.fit)
    if not Path(args.curves).exists():
        raise DataError(f"file not found: {args.curves}")
    curves = load_curves(args.curves)
    missing = [c.subject_id for c in curves if c.subject_id not in reg_fit.warps.subject_offsets]
    if missing:
        raise DataError(f"subjects not present in the fit: {missing[:5]}")
    scalars = [ScalarRecord(c.subject_id, np.zeros(0), None) for c in curves]
    panel = CurvePanel(curves, scalars)
    aligned = align_curves(panel, reg_fit)
    rows = [
        SubjectCurve(sid, aligned.grid, aligned.values[i])
        for i, sid in enumerate(aligned.subject_ids)
    ]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_curves(out_path, rows)
    return 0


def _load_registration_only(fit_dir) -> RegistrationFit:
    payload = _read_json(Path(fit_dir) / "registration.json")
    return RegistrationFit.from_dict(payload["fit"])


# ---------------------------------------------------------------------------
# evaluate


def _read_predictions(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTIONS_HEADER:
            raise DataError(f"unexpected predictions header: {header}")
        rows = []
        for line in reader:
            if len(line) != len(PREDICTIONS_HEADER):
                raise DataError(f"malformed predictions row: {line}")
            rows.append(
                {
                    "subject_id": line[0],
                    "pi_hat": float(line[1]),
                    "label": int(line[2]),
                }
            )
    return rows


def cmd_evaluate(args) -> int:
    preds = _read_predictions(args.predictions)
    truth = _read_json(args.truth)
    label_of = dict(zip(truth["subjects"], truth["labels"]))
    missing = [p["subject_id"] for p in preds if p["subject_id"] not in label_of]
    if missing:
        raise DataError(f"predicted subjects missing from truth: {missing[:5]}")
    if not preds:
        raise DataError("no predictions to score")
    y_true = [label_of[p["subject_id"]] for p in preds]
    y_pred = [p["label"] for p in preds]

    report = MetricsReport(
        ca=metric_ca(y_true, y_pred),
        ri=metric_rand(y_true, y_pred),
        ari=metric_ari(y_true, y_pred),
    )

    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "metrics",
        "n_scored": len(preds),
        "metrics": report.to_dict(),
    }

    if args.fit:
        reg_fit = _load_registration_only(args.fit)
        anchors = np.asarray(truth["anchors"], dtype=float)
        grid = np.linspace(0.0, 1.0, 101)
        est, true = {}, {}
        from .registration import warp_values

        for sid, offs in truth["warp_offsets"].items():
            if sid not in reg_fit.warps.subject_offsets:
                continue
            est[sid] = warp_values(
                reg_fit.warps.anchors, reg_fit.warps.ordinates(sid), grid
            )
            true[sid] = warp_values(anchors, anchors + np.asarray(offs, dtype=float), grid)
        if est:
            payload["metrics"]["warp_imse"] = warp_imse(est, true, grid)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_path, payload)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    """Invalid flag combination caught after argparse."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpclass",
        description="Joint registration and classification of bivariate curve panels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic study data set")
    p.add_argument("--study", type=int, choices=(1, 2), required=True)
    p.add_argument("--scenario", choices=("A", "B"), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--n-obs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--split-files",
        action="store_true",
        help="also write curves/scalars split into train and test halves",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit registration and classifier")
    p.add_argument("--curves", required=True)
    p.add_argument("--scalars", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--timings", action="store_true", help="include wall times in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="iterative label prediction for new subjects")
    p.add_argument("--fit", required=True, help="directory with fit artifacts")
    p.add_argument("--curves", required=True)
    p.add_argument("--scalars", required=True)
    p.add_argument("--max-iter", type=int, default=10)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("register", help="write aligned curves on the common grid")
    p.add_argument("--fit", required=True)
    p.add_argument("--curves", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score predictions against simulation truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--fit", default=None, help="optionally score fitted warps too")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
