"""File-staged pipeline: prepare -> fingerprint / embed-text -> split -> train -> eval.

Every stage writes ``<output>.manifest.json`` recording flags, seeds and
input hashes. Exit codes: 0 ok, 2 schema/usage, 3 data, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import TrainConfig, encode, load_checkpoint, save_checkpoint, train
from .errors import ChembridgeError, DataError, SchemaError
from .evaluation import (
    DIRECTIONS, TEXT_TO_MOL, bootstrap_ci, evaluate, export_simmatrix,
    grouped_recall_at_1, mrr, NoGroupedQueriesError, recall_at_k, similarity_matrix,
)
from .fingerprint import ecfp
from .ingest import Dataset, build_text_rich, load_dataset, write_dataset
from .scaffold import ScaffoldKey, murcko_scaffold, random_split, scaffold_key, scaffold_split
from .smiles import parse_smiles
from .text_embed import EmbeddingMatrix, hash_embed_matrix, load_embeddings, write_emb1

log = logging.getLogger("chembridge")

SEED_ENV = "CHEMBRIDGE_SEED"
SPLIT_COLUMNS = ("record_index", "scaffold_key", "subset")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(target: Path, args: argparse.Namespace, inputs: list[Path],
                   outputs: list[Path], started: float) -> Path:
    flags = {k: (str(v) if isinstance(v, Path) else v)
             for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    path = target.with_name(target.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"{SEED_ENV}={raw!r} is not an integer")


def _csv_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def read_column(path: Path, name: str) -> list[str]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or name not in reader.fieldnames:
            raise SchemaError(f"{path}: missing required column {name!r}")
        return [row[name] for row in reader]


def compute_scaffold_keys(dataset: Dataset, keep_largest: bool = True) -> list[ScaffoldKey]:
    keys = []
    for i, rec in enumerate(dataset):
        try:
            graph = parse_smiles(rec.canonical_smiles, keep_largest)
        except DataError as exc:
            raise DataError(f"row {i} ({rec.molecule_id}): {exc}") from None
        keys.append(scaffold_key(murcko_scaffold(graph)))
    return keys


def write_split(path: Path, keys: list[ScaffoldKey], train_idx, test_idx) -> None:
    subset = {i: "train" for i in train_idx}
    subset.update({i: "test" for i in test_idx})
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPLIT_COLUMNS)
        for i, k in enumerate(keys):
            w.writerow([i, k.key, subset[i]])


def read_split(path: Path, n: int) -> tuple[list[int], list[int]]:
    train_idx, test_idx = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SPLIT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing required column {missing[0]!r}")
        for row in reader:
            i = int(row["record_index"])
            if not 0 <= i < n:
                raise DataError(f"{path}: record_index {i} out of range for {n} records")
            (test_idx if row["subset"] == "test" else train_idx).append(i)
    if len(train_idx) + len(test_idx) != n or len(set(train_idx) | set(test_idx)) != n:
        raise DataError(f"{path}: split does not cover the {n} dataset records exactly once")
    return train_idx, test_idx


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> list[Path]:
    ds = load_dataset(args.input, args.min_text_len)
    write_dataset(ds, args.out, include_drug_name=args.with_drug_name)
    log.info("wrote %d records to %s", len(ds), args.out)
    return [args.input]


def cmd_fingerprint(args) -> list[Path]:
    ds = load_dataset(args.input, 0)
    rows = np.zeros((len(ds), args.nbits), dtype=np.float32)
    for i, rec in enumerate(ds):
        try:
            graph = parse_smiles(rec.canonical_smiles, not args.keep_all_components)
        except DataError as exc:
            raise DataError(f"row {i} ({rec.molecule_id}): {exc}") from None
        rows[i] = ecfp(graph, args.radius, args.nbits).bits
    write_emb1(EmbeddingMatrix(tuple(ds.keys), rows), args.out)
    return [args.input]


def cmd_embed_text(args) -> list[Path]:
    ds = load_dataset(args.input, 0)
    if args.rebuild:
        texts = [build_text_rich(r, args.with_drug_name) for r in ds]
    else:
        texts = read_column(args.input, "text_rich")
    write_emb1(hash_embed_matrix(texts, ds.keys, args.dim), args.out)
    return [args.input]


def cmd_split(args) -> list[Path]:
    ds = load_dataset(args.input, 0)
    keys = compute_scaffold_keys(ds, not args.keep_all_components)
    if args.mode == "scaffold":
        split = scaffold_split(keys, args.test_frac, args.seed)
        shared = {keys[i] for i in split.train_indices} & {keys[i] for i in split.test_indices}
        if shared:
            raise DataError(f"internal error: {len(shared)} scaffolds on both sides")
    else:
        split = random_split(len(ds), args.test_frac, args.seed)
    write_split(args.out, keys, split.train_indices, split.test_indices)
    log.info("split: %d train, %d test", len(split.train_indices), len(split.test_indices))
    return [args.input]


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(
        temperature=args.temperature, lr=args.lr, weight_decay=args.weight_decay,
        epochs=args.epochs, batch_size=args.batch_size, hard_negative_beta=args.beta,
        margin=args.margin, margin_weight=args.margin_weight, seed=args.seed, dim=args.dim,
    )
    cfg.validate()
    return cfg


def _load_inputs(args):
    ds = load_dataset(args.data, 0)
    mol = load_embeddings(args.mol, ds)
    text = load_embeddings(args.text, ds) if getattr(args, "text", None) else None
    train_idx, test_idx = read_split(args.split, len(ds))
    return ds, mol, text, train_idx, test_idx


def cmd_train(args) -> list[Path]:
    cfg = _train_config(args)
    ds, mol, text, train_idx, _ = _load_inputs(args)
    targets = [ds[i].target_id for i in train_idx]
    params, history = train(mol.values[train_idx], text.values[train_idx], targets, cfg)
    save_checkpoint(params, cfg, args.out)
    hist_path = args.history or args.out.with_suffix(".history.csv")
    with Path(hist_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "infonce", "margin"])
        for e, row in enumerate(zip(history.loss, history.infonce, history.margin), start=1):
            w.writerow([e, *(f"{v:.8f}" for v in row)])
    return [args.mol, args.text, args.data, args.split]


def _subset_indices(args, train_idx, test_idx):
    return test_idx if args.subset == "test" else train_idx


def cmd_eval(args) -> list[Path]:
    params, _ = load_checkpoint(args.bridge)
    ds, mol, text, train_idx, test_idx = _load_inputs(args)
    idx = _subset_indices(args, train_idx, test_idx)
    if len(idx) < 2:
        raise DataError(f"{args.subset} subset has fewer than 2 records")
    B_T, B_M = encode(params, mol.values[idx], text.values[idx])
    S = similarity_matrix(B_T.astype(np.float64), B_M.astype(np.float64))
    targets = [ds[i].target_id for i in idx]
    reports = {
        d: evaluate(S, targets, d, k_max=args.k_max, n_boot=args.bootstrap, seed=args.seed)
        for d in DIRECTIONS
    }
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "primary_direction": TEXT_TO_MOL,
        "n_test": len(idx),
        "reports": {d: r.to_dict() for d, r in reports.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    with (out / "cmc.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [(d, kind) for d in DIRECTIONS for kind in ("global", "grouped")]
        w.writerow(["k", *(f"{kind}_{d}" for d, kind in cols)])
        longest = max(len(getattr(reports[d], f"cmc_{kind}")) for d, kind in cols)
        for k in range(longest):
            row = []
            for d, kind in cols:
                curve = getattr(reports[d], f"cmc_{kind}")
                row.append(f"{curve[k]:.6f}" if k < len(curve) else "")
            w.writerow([k + 1, *row])
    if args.export_sim:
        K = min(args.export_sim, len(idx))
        if K < args.export_sim:
            log.warning("export-sim K=%d exceeds subset size; writing %d", args.export_sim, K)
        ids = [ds[i].key for i in idx]
        export_simmatrix(S, K, out / "sim.csv", ids, ids)
    return [args.bridge, args.mol, args.text, args.data, args.split]


def cmd_ablate(args) -> list[Path]:
    ds = load_dataset(args.data, 0)
    mol = load_embeddings(args.mol, ds)
    train_idx, test_idx = read_split(args.split, len(ds))
    text_by_flag: dict[bool, EmbeddingMatrix] = {}
    for flag in sorted(set(args.drugname)):
        external = args.text_with_drug if flag else args.text_without_drug
        if external:
            text_by_flag[flag] = load_embeddings(external, ds)
        else:
            texts = [build_text_rich(r, flag) for r in ds]
            text_by_flag[flag] = hash_embed_matrix(texts, ds.keys, args.text_dim)
    train_targets = [ds[i].target_id for i in train_idx]
    test_targets = [ds[i].target_id for i in test_idx]
    rows = []
    for flag in args.drugname:
        text = text_by_flag[flag]
        for T in args.temps:
            for m in args.margins:
                args.temperature, args.margin = T, m
                cfg = _train_config(args)
                params, _ = train(mol.values[train_idx], text.values[train_idx], train_targets, cfg)
                B_T, B_M = encode(params, mol.values[test_idx], text.values[test_idx])
                S = similarity_matrix(B_T.astype(np.float64), B_M.astype(np.float64))
                try:
                    g = grouped_recall_at_1(S, test_targets)
                    lo, hi = bootstrap_ci("grouped_recall@1", S, test_targets, args.bootstrap,
                                          seed=args.seed)
                except NoGroupedQueriesError:
                    g = lo = hi = None
                rows.append({
                    "with_drug_name": int(flag), "temperature": T, "margin": m,
                    "grouped_recall1": g, "grouped_ci_lo": lo, "grouped_ci_hi": hi,
                    "recall1": recall_at_k(S, 1), "mrr": mrr(S),
                })
                log.info("ablate drug=%s T=%g m=%g grouped=%s", flag, T, m, g)
    scored = [r["grouped_recall1"] for r in rows if r["grouped_recall1"] is not None]
    best = max(scored) if scored else None
    marked = False
    for r in rows:
        r["best"] = int(not marked and best is not None and r["grouped_recall1"] == best)
        marked = marked or bool(r["best"])
    fields = ["with_drug_name", "temperature", "margin", "grouped_recall1", "grouped_ci_lo",
              "grouped_ci_hi", "recall1", "mrr", "best"]
    with args.out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else f"{v:.6f}" if isinstance(v, float) else v)
                        for k, v in r.items()})
    inputs = [args.mol, args.data, args.split]
    inputs += [p for p in (args.text_with_drug, args.text_without_drug) if p]
    return inputs


# ---------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--beta", type=float, default=d.hard_negative_beta,
                   help="denominator weight for same-target negatives (1 disables)")
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--margin-weight", type=float, default=d.margin_weight,
                   help="weight of the same-target hinge term (0 disables)")
    p.add_argument("--dim", type=int, default=d.dim, help="shared embedding width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chembridge", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads; 1 forces the single-threaded reference mode")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _default_seed()

    p = sub.add_parser("prepare", help="clean a drug/mechanism CSV and add text_rich")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--min-text-len", type=int, default=20)
    p.add_argument("--with-drug-name", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("fingerprint", help="ECFP bit matrix as EMB1")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--nbits", type=int, default=2048)
    p.add_argument("--keep-all-components", action="store_true",
                   help="fingerprint salts and mixtures whole instead of the largest fragment")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("embed-text", help="hashed bag-of-words text embeddings as EMB1")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--rebuild", action="store_true",
                   help="rebuild text_rich from the record fields instead of reading the column")
    p.add_argument("--with-drug-name", action="store_true", help="with --rebuild")
    p.set_defaults(func=cmd_embed_text)

    p = sub.add_parser("split", help="scaffold or random train/test split")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("scaffold", "random"), default="scaffold")
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--keep-all-components", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the projection heads")
    p.add_argument("--mol", type=Path, required=True)
    p.add_argument("--text", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--history", type=Path, default=None)
    p.add_argument("--seed", type=int, default=seed)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a trained bridge")
    p.add_argument("--bridge", type=Path, required=True)
    p.add_argument("--mol", type=Path, required=True)
    p.add_argument("--text", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--subset", choices=("test", "train"), default="test")
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--export-sim", type=int, default=40, help="K for the K x K block (0 skips)")
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="grid over temperature, margin and drug-name inclusion")
    p.add_argument("--mol", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--temps", type=_csv_floats, default=[0.05, 0.07])
    p.add_argument("--margins", type=_csv_floats, default=[0.0, 0.15])
    p.add_argument("--drugname", type=_on_off_list, default=[True, False])
    p.add_argument("--text-dim", type=int, default=512)
    p.add_argument("--text-with-drug", type=Path, default=None)
    p.add_argument("--text-without-drug", type=Path, default=None)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=seed)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _on_off_list(text: str) -> list[bool]:
    table = {"on": True, "off": False}
    try:
        return [table[x.strip().lower()] for x in text.split(",") if x.strip()]
    except KeyError as exc:
        raise argparse.ArgumentTypeError(f"expected on/off, got {exc.args[0]!r}") from None


def _primary_output(args) -> Path:
    return args.out_dir / "report.json" if args.command == "eval" else args.out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    started = time.time()
    try:
        inputs = args.func(args)
        out = _primary_output(args)
        outputs = [out]
        if args.command == "eval":
            outputs += [args.out_dir / "cmc.csv", args.out_dir / "sim.csv"]
        write_manifest(out, args, [Path(p) for p in inputs], outputs, started)
    except ChembridgeError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except ValueError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 5
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
