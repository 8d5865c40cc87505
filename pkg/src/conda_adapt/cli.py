"""Command-line pipeline: simulate, fit-source, adapt, evaluate, annotate,
gradcheck, sweep.

Each command echoes its resolved configuration and outputs as one JSON object
on stdout and signals failures as a JSON error object on stderr with a
nonzero exit code.  Heavy imports happen inside the handlers so the
``CONDA_ADAPT_THREADS`` cap can be applied to the BLAS pool before numpy
loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _pin_threads() -> None:
    cap = os.environ.get("CONDA_ADAPT_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise SystemExit(f"CONDA_ADAPT_THREADS must be a positive integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _echo(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_run_config(path: str | None, overrides: list):
    from . import iofmt

    if path:
        adapt_cfg, scenario = iofmt.read_config(path)
    else:
        adapt_cfg, scenario = iofmt.parse_config_text("")
    if overrides:
        adapt_cfg, scenario = iofmt.apply_overrides(adapt_cfg, scenario, overrides)
    return adapt_cfg, scenario


def cmd_simulate(args) -> int:
    from . import iofmt
    from .shiftsim import generate, oracle_accuracy

    _, scenario = _load_run_config(args.config, args.set or [])
    source, target, logits, world = generate(scenario)

    os.makedirs(args.out, exist_ok=True)
    dataset_files = {
        "source_features.emb": (source.features, "f8"),
        "source_labels.emb": None,
        "target_features.emb": (target.features, "f8"),
        "target_labels.emb": None,
        "zs_logits.emb": (logits.zero_shot, "f8"),
        "lp_logits.emb": (logits.linear_probe, "f8"),
    }
    iofmt.write_emb(os.path.join(args.out, "source_features.emb"), source.features)
    iofmt.write_labels(os.path.join(args.out, "source_labels.emb"), source.labels)
    iofmt.write_emb(os.path.join(args.out, "target_features.emb"), target.features)
    iofmt.write_labels(os.path.join(args.out, "target_labels.emb"), target.labels)
    iofmt.write_emb(os.path.join(args.out, "zs_logits.emb"), logits.zero_shot)
    iofmt.write_emb(os.path.join(args.out, "lp_logits.emb"), logits.linear_probe)
    iofmt.write_emb(os.path.join(args.out, "bank.emb"), world.handed_bank)
    iofmt.save_world(os.path.join(args.out, "world.json"), world)

    def _entry(name):
        path = os.path.join(args.out, name)
        arr = iofmt.read_emb(path)
        return {"rows": arr.shape[0], "cols": arr.shape[1], "crc32": iofmt.file_crc(path)}

    manifest = {
        "schema": "sim-manifest/v1",
        "scenario": iofmt.scenario_to_dict(scenario),
        "dataset_files": {name: _entry(name) for name in dataset_files},
        "aux_files": {"bank.emb": _entry("bank.emb"),
                      "world.json": {"crc32": iofmt.file_crc(os.path.join(args.out, "world.json"))}},
        "oracle_avg": float(oracle_accuracy(world, target).avg),
        "null_shift": scenario.severity == 0.0,
    }
    iofmt.write_json(os.path.join(args.out, "manifest.json"), manifest)
    _echo({"command": "simulate", "out": args.out,
           "scenario": iofmt.scenario_to_dict(scenario),
           "oracle_avg": manifest["oracle_avg"]})
    return 0


def cmd_fit_source(args) -> int:
    import numpy as np

    from . import iofmt
    from .adapt import evaluate
    from .model import (CbmModel, ConceptBank, HeadFitConfig, concept_scores,
                        fit_source_head, init_residual, predict)
    from .stats import fit_class_stats

    adapt_cfg, _ = _load_run_config(args.config, args.set or [])
    features = iofmt.read_emb(args.features)
    labels = iofmt.read_labels(args.labels)
    bank_vectors = iofmt.read_emb(args.bank)
    num_classes = args.classes if args.classes else int(labels.max()) + 1

    bank = ConceptBank(vectors=bank_vectors)
    scores = concept_scores(bank.vectors, features)
    fit_cfg = HeadFitConfig(epochs=args.fit_epochs, optimizer=args.fit_optimizer,
                            learning_rate=args.fit_lr, lambda_sparse=args.fit_lambda_sparse,
                            alpha=adapt_cfg.alpha)
    head = fit_source_head(scores, labels, num_classes, fit_cfg)
    stats = fit_class_stats(scores, labels, num_classes)
    residual = init_residual(adapt_cfg.residual_count, bank.dim, num_classes,
                             adapt_cfg.seed)
    model = CbmModel(bank=bank, head=head, residual=residual)

    os.makedirs(args.out, exist_ok=True)
    iofmt.save_model(os.path.join(args.out, "model.json"), model)
    iofmt.save_stats(os.path.join(args.out, "stats.json"), stats)
    report = evaluate(predict(model, features), labels, num_classes)
    iofmt.write_json(os.path.join(args.out, "source_report.json"), report.to_dict())
    _echo({"command": "fit-source", "out": args.out,
           "classes": num_classes, "concepts": bank.m, "r": residual.r,
           "source_avg": report.avg, "source_worst_group": report.worst_group})
    return 0


def _stream_outputs(out_dir, session, batches, report):
    from . import iofmt

    lines = []
    for record, idx in zip(session.log, batches):
        obj = dict(record)
        obj["indices"] = [int(i) for i in idx]
        lines.append(json.dumps(obj, sort_keys=True))
    with open(os.path.join(out_dir, "predictions.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if report is not None:
        iofmt.write_json(os.path.join(out_dir, "report.json"), report.to_dict())
    iofmt.write_json(os.path.join(out_dir, "perf.json"), session.perf_dict())


def cmd_adapt(args) -> int:
    import numpy as np

    from . import iofmt
    from .adapt import AdaptSession, adapt_stream, split_batches
    from .model import concept_scores
    from .pseudolabel import PredictorLogits, ensemble_pseudolabel
    from .stats import diagnose_shift

    adapt_cfg, _ = _load_run_config(args.config, args.set or [])
    model = iofmt.load_model(args.model)
    stats = iofmt.load_stats(args.stats)
    features = iofmt.read_emb(args.features)
    logits = PredictorLogits(zero_shot=iofmt.read_emb(args.zs_logits),
                             linear_probe=iofmt.read_emb(args.lp_logits))
    if logits.n != features.shape[0]:
        raise ValueError(f"{features.shape[0]} feature rows but {logits.n} logit rows")
    labels = iofmt.read_labels(args.labels) if args.labels else None
    if labels is not None and labels.shape[0] != features.shape[0]:
        raise ValueError("label count does not match feature rows")

    os.makedirs(args.out, exist_ok=True)
    # advisory diagnosis on the unadapted model, against the whole set
    pseudo, _ = ensemble_pseudolabel(logits, adapt_cfg.zs_temperature)
    shift = diagnose_shift(stats, concept_scores(model.bank.vectors, features), pseudo)
    iofmt.write_json(os.path.join(args.out, "shift_report.json"), shift.to_dict())

    batches = split_batches(features.shape[0], adapt_cfg.batch_size, adapt_cfg.seed)
    session = AdaptSession(model, stats, adapt_cfg)
    stream = ((features[idx], logits.slice(idx),
               labels[idx] if labels is not None else None) for idx in batches)
    report = adapt_stream(session, stream)
    iofmt.save_model(os.path.join(args.out, "model_adapted.json"), model)
    _stream_outputs(args.out, session, batches, report)

    echo = {"command": "adapt", "out": args.out,
            "config": iofmt.adapt_config_to_dict(adapt_cfg),
            "batches": session.batches_seen,
            "shift_verdict": shift.verdict,
            "counters": session.counters}
    if report is not None:
        echo["avg"] = report.avg
        echo["worst_group"] = report.worst_group
    _echo(echo)
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from . import iofmt
    from .adapt import evaluate

    labels = iofmt.read_labels(args.labels)
    preds = np.full(labels.shape[0], -1, dtype=np.int64)
    with open(args.predictions, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            preds[np.asarray(obj["indices"], dtype=np.int64)] = obj["predictions"]
    if (preds < 0).any():
        missing = int((preds < 0).sum())
        raise ValueError(f"{missing} samples have no prediction")
    report = evaluate(preds, labels, args.classes)
    if args.out:
        iofmt.write_json(args.out, report.to_dict())
    _echo({"command": "evaluate", "avg": report.avg,
           "worst_group": report.worst_group,
           "per_class": report.to_dict()["per_class"]})
    return 0


def cmd_annotate(args) -> int:
    from . import iofmt
    from .annotate import SimilarityMatrix, annotate_concepts

    if bool(args.bank) == bool(args.model):
        raise ValueError("give exactly one of --bank or --model")
    if args.bank:
        vectors = iofmt.read_emb(args.bank)
    else:
        model = iofmt.load_model(args.model)
        vectors = model.residual.vectors if args.branch == "residual" else model.bank.vectors
    features = iofmt.read_emb(args.features)
    values = iofmt.read_emb(args.simmat)
    with open(args.captions, "r", encoding="utf-8") as fh:
        captions = [line.rstrip("\n") for line in fh if line.strip()]
    simmat = SimilarityMatrix(values=values, captions=captions)
    result = annotate_concepts(vectors, features, simmat, args.threshold)
    if args.out:
        iofmt.write_json(args.out, result.to_dict())
    _echo({"command": "annotate", "threshold": args.threshold,
           "accepted": result.accepted_count, "concepts": len(result.entries),
           "entries": result.to_dict()["entries"]})
    return 0


def cmd_gradcheck(args) -> int:
    from .losses import gradient_check_report

    worst = gradient_check_report(num_seeds=args.seeds, base_seed=args.seed)
    failed = {k: v for k, v in worst.items() if v >= args.tol}
    _echo({"command": "gradcheck", "seeds": args.seeds, "tolerance": args.tol,
           "worst_rel_err": worst, "ok": not failed})
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    import csv
    import itertools

    from . import iofmt
    from .adapt import AdaptSession, adapt_stream, evaluate, split_batches
    from .model import (CbmModel, ConceptBank, concept_scores, fit_source_head,
                        init_residual, predict)
    from .shiftsim import generate
    from .stats import fit_class_stats

    base_adapt, scenario = _load_run_config(args.config, args.set or [])
    grid = {}
    for item in args.grid:
        if "=" not in item:
            raise ValueError(f"grid entries look like key=v1,v2, got {item!r}")
        key, values = item.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    if not grid:
        raise ValueError("no grid given")

    source, target, logits, world = generate(scenario)
    bank_vectors = world.handed_bank
    num_classes = scenario.class_count

    os.makedirs(args.out, exist_ok=True)
    keys = sorted(grid)
    rows = []
    for point_index, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        overrides = [f"{k}={v}" for k, v in zip(keys, combo)]
        cfg, _ = iofmt.apply_overrides(base_adapt, scenario, overrides)

        bank = ConceptBank(vectors=bank_vectors.copy())
        scores = concept_scores(bank.vectors, source.features)
        head = fit_source_head(scores, source.labels, num_classes)
        stats = fit_class_stats(scores, source.labels, num_classes)
        residual = init_residual(cfg.residual_count, bank.dim, num_classes, cfg.seed)
        model = CbmModel(bank=bank, head=head, residual=residual)
        unadapted = evaluate(predict(model, target.features), target.labels, num_classes)

        batches = split_batches(target.n, cfg.batch_size, cfg.seed)
        session = AdaptSession(model, stats, cfg)
        stream = ((target.features[idx], logits.slice(idx), target.labels[idx])
                  for idx in batches)
        report = adapt_stream(session, stream)
        row = {"point": point_index, **dict(zip(keys, combo)),
               "unadapted_avg": unadapted.avg, "unadapted_worst_group": unadapted.worst_group,
               "avg": report.avg, "worst_group": report.worst_group}
        rows.append(row)

    out_csv = os.path.join(args.out, "sweep_results.csv")
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    best = max(rows, key=lambda r: r["avg"])
    _echo({"command": "sweep", "out": out_csv, "points": len(rows), "best": best})
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conda-adapt",
        description="Concept-bottleneck test-time adaptation on frozen embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("simulate", help="generate a synthetic shift scenario")
    add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-source", help="fit head and statistics on source data")
    add_config(p)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--fit-epochs", type=int, default=300)
    p.add_argument("--fit-optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--fit-lr", type=float, default=0.05)
    p.add_argument("--fit-lambda-sparse", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_source)

    p = sub.add_parser("adapt", help="adapt a model over a target stream")
    add_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--zs-logits", required=True)
    p.add_argument("--lp-logits", required=True)
    p.add_argument("--labels", help="optional true labels for a final report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="score a prediction log against labels")
    p.add_argument("--predictions", required=True, help="predictions.jsonl from adapt")
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("annotate", help="name concept vectors from caption similarities")
    p.add_argument("--bank")
    p.add_argument("--model")
    p.add_argument("--branch", choices=("main", "residual"), default="main")
    p.add_argument("--features", required=True)
    p.add_argument("--simmat", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid-run adaptation configs on one scenario")
    add_config(p)
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    _pin_threads()
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, TypeError) as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
