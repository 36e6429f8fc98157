"""Command-line pipeline: synth, extract, make-pairs, featurize, fit, score,
evaluate, select.

Every command validates its inputs, writes only its declared outputs, and
threads ``--seed`` through each stochastic step, so reruns with identical
inputs produce byte-identical outputs. Exit codes: 0 success, 2 input or
validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import augment as aug
from . import evaluate as ev
from . import genmodel as gm
from . import synth as sy
from . import volume as vol
from .encode import EmbeddingSet, featurize_patches, read_embeddings, write_embeddings
from .flow import nf_fit
from .gmm import gmm_fit
from .scoring import Aggregation, score_patient, write_scores_csv, read_scores_csv

STRATEGIES = [s.value for s in Aggregation]


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError("dims must be 'nx,ny,nz'")
    return tuple(parts)


def _patch_store_paths(patches_dir: Path) -> list[Path]:
    stores = sorted(patches_dir.glob("*.patches.json"))
    if not stores:
        raise ValueError(f"no patch stores under {patches_dir}")
    return stores


def cmd_synth(args) -> int:
    sy.generate_cohort(
        n_healthy=args.healthy,
        n_diseased=args.diseased,
        out_dir=args.out,
        seed=args.seed,
        dims=_parse_dims(args.dims),
        channels=args.channels,
    )
    print(f"wrote cohort of {args.healthy + args.diseased} patients to {args.out}")
    return 0


def cmd_extract(args) -> int:
    manifest = vol.load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kept, skipped = [], []
    for i, entry in enumerate(manifest.entries):
        volume = vol.load_volume(manifest.volume_file(entry))
        mask = vol.load_mask(manifest.mask_file(entry))
        patches = vol.extract_patch_grid(
            volume,
            mask,
            patch_size=args.patch_size,
            overlap=args.overlap,
            min_lung_coverage=args.min_coverage,
            patient_id=entry.patient_id,
        )
        patches = vol.subsample_patches(patches, max_n=args.max_ppp, seed=[args.seed, i])
        if not patches:
            skipped.append(entry.patient_id)
            continue
        vol.write_patch_store(patches, entry.patient_id, entry.subject_label, entry.split, out_dir)
        kept.append(entry.patient_id)
    index = {
        "magic": "PATCHDIR1",
        "patients": kept,
        "skipped": skipped,
        "patch_size": args.patch_size,
        "overlap": args.overlap,
        "min_coverage": args.min_coverage,
        "max_ppp": args.max_ppp,
        "seed": args.seed,
    }
    with open(out_dir / "patches_index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
        fh.write("\n")
    print(f"extracted patches for {len(kept)} patients ({len(skipped)} skipped)")
    return 0


def cmd_make_pairs(args) -> int:
    cfg = aug.AugmentConfig.from_json(args.config) if args.config else aug.AugmentConfig()
    by_patient = []
    for store in _patch_store_paths(Path(args.patches)):
        meta, patches = vol.read_patch_store(store)
        if args.split != "all" and meta["split"] != args.split:
            continue
        by_patient.append((meta["patient_id"], patches))
    if not by_patient:
        raise ValueError(f"no patients in split {args.split!r}")
    dataset = aug.build_pair_dataset(by_patient, cfg, seed=args.seed)
    out = aug.write_pair_dataset(dataset, args.out)
    with open(Path(args.out) / "pairs_config.json", "w", encoding="utf-8") as fh:
        json.dump({"augment": cfg.to_dict(), "seed": args.seed, "split": args.split}, fh, indent=1)
        fh.write("\n")
    print(f"wrote {len(dataset.records)} view pairs to {out.parent}")
    return 0


def cmd_featurize(args) -> int:
    if args.encoder == "external":
        if not args.emb:
            raise ValueError("--encoder external requires --emb FILE")
        emb_set = read_embeddings(args.emb)
        emb_set.provenance = "external"
        write_embeddings(emb_set, args.out)
        print(f"passed through {len(emb_set.rows)} external embeddings")
        return 0
    rows = []
    for store in _patch_store_paths(Path(args.patches)):
        meta, patches = vol.read_patch_store(store)
        if args.split != "all" and meta["split"] != args.split:
            continue
        rows.extend(featurize_patches(patches, meta["patient_id"], meta["normal"]))
    if not rows:
        raise ValueError(f"no patches in split {args.split!r}")
    emb_set = EmbeddingSet(d=len(rows[0].values), rows=rows, provenance="handcrafted")
    write_embeddings(emb_set, args.out)
    print(f"wrote {len(rows)} embeddings (d={emb_set.d}) to {args.out}")
    return 0


def cmd_fit(args) -> int:
    cfg = gm.FitConfig.from_json(args.config) if args.config else gm.FitConfig()
    if args.seed is not None:
        cfg.em.seed = args.seed
        cfg.nf.seed = args.seed
    emb_set = read_embeddings(args.emb)
    normal = emb_set.normal_matrix()
    if normal.shape[0] == 0:
        raise ValueError("no rows flagged normal in the embedding file")
    if args.model == "gmm":
        if normal.shape[0] < args.k:
            raise ValueError(f"n < k: {normal.shape[0]} normal rows for k={args.k}")
        model, trace = gmm_fit(normal, args.k, cfg.em)
        hyper = {"config": cfg.to_dict()["em"], "n_train": int(normal.shape[0])}
        gm.save_model(model, args.out, seed=cfg.em.seed, hyperparameters=hyper)
    else:
        if normal.shape[0] < cfg.nf.batch_size:
            cfg.nf.batch_size = normal.shape[0]
        model, trace = nf_fit(normal, cfg.nf)
        hyper = {"config": cfg.to_dict()["nf"], "n_train": int(normal.shape[0])}
        gm.save_model(model, args.out, seed=cfg.nf.seed, hyperparameters=hyper)
    print(f"fit {args.model} on {normal.shape[0]} normal embeddings; final objective {trace[-1]:.4f}")
    return 0


def cmd_score(args) -> int:
    model = gm.load_model(args.model)
    emb_set = read_embeddings(args.emb)
    manifest = vol.load_manifest(args.manifest)
    labels = {e.patient_id: 1 if e.subject_label == "diseased" else 0 for e in manifest.entries}
    strategy = Aggregation(args.strategy)
    records = []
    for pid, Z in emb_set.by_patient():
        if pid not in labels:
            raise ValueError(f"patient {pid} missing from manifest")
        records.append(score_patient(model, pid, Z, labels[pid], strategy))
    write_scores_csv(records, strategy, args.out)
    print(f"scored {len(records)} patients with {strategy.value} aggregation")
    return 0


def cmd_evaluate(args) -> int:
    records, strategy = read_scores_csv(args.scores)
    name = args.model_name
    n_params = None
    if args.model_file:
        model = gm.load_model(args.model_file)
        n_params = model.n_parameters
        if name == "":
            kind = type(model).__name__
            name = f"gmm-k{model.k}" if kind == "GmmModel" else f"nf-{len(model.blocks)}blocks"
    report = ev.metrics_report(
        records,
        strategy=strategy,
        model=name or Path(args.scores).stem,
        threshold=args.threshold,
        n_params=n_params,
    )
    ev.write_report(report, args.out)
    print(f"auroc {report['auroc']:.4f} acc {report['acc']:.4f} -> {args.out}")
    return 0


def cmd_select(args) -> int:
    reports = [ev.read_report(p) for p in args.reports]
    entries = [(float(r["auroc"]), r.get("n_params")) for r in reports]
    best = gm.pick_best(entries)
    doc = {
        "best_index": best,
        "best": reports[best],
        "candidates": [
            {"report": str(p), "auroc": e[0], "n_params": e[1]}
            for p, e in zip(args.reports, entries)
        ],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"selected {reports[best]['model']} (auroc {entries[best][0]:.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lungood",
        description="Patch-density anomaly detection pipeline for lung CT cohorts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled phantom cohort")
    p.add_argument("--healthy", type=int, required=True)
    p.add_argument("--diseased", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="72,72,72", help="grid size as nx,ny,nz")
    p.add_argument("--channels", type=int, default=1, choices=(1, 2))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract per-patient lung patch stores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--overlap", type=float, default=0.0)
    p.add_argument("--min-coverage", type=float, default=0.5)
    p.add_argument("--max-ppp", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("make-pairs", help="write an augmented view-pair dataset")
    p.add_argument("--patches", required=True)
    p.add_argument("--config", default=None, help="augmentation config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("featurize", help="embed patches into an EMB1 file")
    p.add_argument("--patches", default=None)
    p.add_argument("--encoder", default="handcrafted", choices=("handcrafted", "external"))
    p.add_argument("--emb", default=None, help="existing EMB1 file for --encoder external")
    p.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("fit", help="fit a density model on normal embeddings")
    p.add_argument("--emb", required=True)
    p.add_argument("--model", required=True, choices=("gmm", "nf"))
    p.add_argument("--k", type=int, default=4, choices=(1, 2, 4, 8))
    p.add_argument("--config", default=None, help="fit config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score patients under a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--manifest", required=True, help="for patient disease labels")
    p.add_argument("--strategy", default="mean", choices=STRATEGIES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="patient-level metrics from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--model-file", default=None, help="report the model's parameter count")
    p.add_argument("--model-name", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="pick the best report by validation AUROC")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
