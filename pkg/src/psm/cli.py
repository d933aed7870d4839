"""Command-line front end: pretrain, probe, diagnose, mine, ablate.

Every command is a pure function of its arguments, input files, and seed;
rerunning reproduces outputs byte for byte. Exit codes: 0 success, 1 bad
usage or configuration, 2 unreadable or malformed data files. All
validation happens before any output file is created.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import _binio, network
from .data import (
    AugmentPolicy,
    DataFormatError,
    Dataset,
    gen_clusters,
    load_csv,
    split_dataset,
)
from .diagnostics import (
    gradient_profile,
    knn_probe,
    linear_probe,
    purity,
    write_gradient_profile_csv,
    write_purity_csv,
)
from .memory_bank import MemoryBank, load_bank, query_topk, query_topk_batch
from .numerics import RngState, l2_normalize_rows
from .pnsm import MiningConfig, mine_negatives
from .trainer import (
    TrainConfig,
    pretrain,
    run_ablation_suite,
    write_metrics_csv,
)

_AUG_KEYS = ("aug_sigma", "aug_dropout", "aug_scale_lo", "aug_scale_hi")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this program reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_synthetic(spec: str) -> dict:
    """Parse a generator spec like ``c4,d32,n512,sep6``."""
    out = {}
    for token in spec.split(","):
        token = token.strip()
        for prefix, key, conv in (
            ("sep", "separation", float),
            ("c", "classes", int),
            ("d", "dim", int),
            ("n", "n_per_class", int),
        ):
            if token.startswith(prefix):
                try:
                    out[key] = conv(token[len(prefix) :])
                except ValueError:
                    raise ValueError(f"bad synthetic token {token!r}") from None
                break
        else:
            raise ValueError(f"bad synthetic token {token!r}")
    missing = {"classes", "dim", "n_per_class", "separation"} - out.keys()
    if missing:
        raise ValueError(f"synthetic spec lacks {sorted(missing)}")
    return out


def _load_data(args) -> tuple[Dataset, Dataset]:
    if getattr(args, "synthetic", None):
        spec = _parse_synthetic(args.synthetic)
        train = gen_clusters(seed=args.seed, split="train", **spec)
        spec_test = dict(spec, n_per_class=max(1, spec["n_per_class"] // 4))
        test = gen_clusters(seed=args.seed, split="test", **spec_test)
        return train, test
    full = load_csv(args.data)
    return split_dataset(full, 0.2, args.seed)


def _config_from_args(args) -> TrainConfig:
    values: dict = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ValueError(f"config file not found: {cfg_path}")
        loaded = json.loads(cfg_path.read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        values.update(loaded)

    overrides = {
        "k": args.k,
        "a": args.a,
        "lam": args.lam,
        "t": args.t,
        "batch_size": args.batch,
        "epochs": args.epochs,
        "warmup_epochs": args.warmup,
        "strategy": args.strategy,
        "seed": args.seed,
        "probe_every": args.probe_every,
        "bank_capacity": args.bank,
        "weight_span": args.span,
    }
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    if args.no_pnsm:
        values["use_pnsm"] = False
    if args.no_soft:
        values["use_soft"] = False
    if args.no_hard:
        values["use_hard"] = False
    if args.baseline:
        values["baseline"] = True
    if args.symmetrize:
        values["symmetrize"] = True

    aug_kwargs = {}
    for key in _AUG_KEYS:
        if key in values:
            aug_kwargs[key.removeprefix("aug_")] = values.pop(key)
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - field_names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for head in ("encoder", "projector", "predictor"):
        if head in values:
            values[head] = tuple(int(w) for w in values[head])
    cfg = TrainConfig(**values)
    if aug_kwargs:
        cfg = dataclasses.replace(cfg, augment=AugmentPolicy(**aug_kwargs))
    cfg.validate()
    return cfg


def _echo_config(cfg: TrainConfig, args) -> dict:
    echo = dataclasses.asdict(cfg)
    echo["data"] = args.synthetic if args.synthetic else str(args.data)
    echo["data_kind"] = "synthetic" if args.synthetic else "csv"
    return echo


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    train_ds, test_ds = _load_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(_echo_config(cfg, args), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    art = pretrain(cfg, train_ds, test_ds)
    write_metrics_csv(art.metrics, out / "metrics.csv")
    write_purity_csv(art.purity_rows, out / "purity.csv")
    network.save_checkpoint(
        art.params,
        art.opt,
        art.target if art.target is not None else art.params,
        out / "checkpoint.psmc",
    )
    summary = {
        "init_knn": art.init_knn,
        "final_knn": art.final_knn,
        "final_metrics": art.metrics[-1] if art.metrics else None,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"run written to {out}")
    if art.final_knn is not None:
        print(f"final_knn={art.final_knn!r}")
    return 0


def _embed_split(ckpt_path, train_ds, test_ds):
    params, _, _ = network.load_checkpoint(ckpt_path)
    return (
        network.embed(params, train_ds.features),
        network.embed(params, test_ds.features),
    )


def cmd_probe(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    train_ds, test_ds = _load_data(args)
    train_emb, test_emb = _embed_split(args.checkpoint, train_ds, test_ds)
    if args.mode == "knn":
        acc = knn_probe(
            train_emb, train_ds.labels, test_emb, test_ds.labels, k_nn=args.k_nn
        )
        print(f"mode=knn k_nn={args.k_nn}")
        print(f"accuracy={acc!r}")
    else:
        top1, topk = linear_probe(
            train_emb, train_ds.labels, test_emb, test_ds.labels
        )
        kk = min(5, int(train_ds.labels.max()) + 1)
        print("mode=linear")
        print(f"top1={top1!r}")
        print(f"top{kk}={topk!r}")
    return 0


def cmd_diagnose(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    train_ds, test_ds = _load_data(args)
    params, _, target = network.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.what == "gradients":
        bank_emb = network.forward_target(target, train_ds.features)
        bank = MemoryBank(max(len(bank_emb), 1), bank_emb.shape[1], with_labels=True)
        bank.enqueue_batch(bank_emb, train_ds.labels)
        _, q, _ = network.forward_online(params, test_ds.features, train=False)
        z2 = network.forward_target(target, test_ds.features)
        profile = gradient_profile(q, z2, bank, rank_depth=args.rank_depth)
        write_gradient_profile_csv(profile, out / "gradient_profile.csv")
        print(f"gradient profile written to {out / 'gradient_profile.csv'}")
        print(f"mean_positive_rank={profile.mean_positive_rank!r}")
        return 0

    # purity: replay one epoch of mining against a fresh bank
    bank = MemoryBank(args.bank, params.config.projector[-1], with_labels=True)
    perm = RngState(args.seed).split("diagnose").permutation(train_ds.n)
    rows = []
    steps = train_ds.n // args.batch
    if steps == 0:
        raise ValueError("batch size exceeds dataset size")
    for step in range(steps):
        sel = perm[step * args.batch : (step + 1) * args.batch]
        z2 = network.forward_target(target, train_ds.features[sel])
        _, nb_idx, _, k_eff = query_topk_batch(bank, z2, args.k)
        if k_eff > 0:
            report = purity(list(bank.labels_at(nb_idx)), train_ds.labels[sel], k=k_eff)
            rows.append((1, step, report.values[0]))
        bank.enqueue_batch(z2, train_ds.labels[sel])
    write_purity_csv(rows, out / "purity.csv")
    mean = float(np.mean([r[2] for r in rows])) if rows else float("nan")
    print(f"purity written to {out / 'purity.csv'}")
    print(f"mean_purity={mean!r}")
    return 0


def cmd_mine(args) -> int:
    bank = load_bank(args.bank)
    ds = load_csv(args.query)
    queries = l2_normalize_rows(ds.features)
    if queries.shape[1] != bank.dim:
        raise DataFormatError(
            f"query dim {queries.shape[1]} does not match bank dim {bank.dim}"
        )
    rng = RngState(args.seed)
    if args.mode == "positive":
        for i, q in enumerate(queries):
            ns = query_topk(bank, q, args.k, query_id=i)
            idx = ",".join(str(int(v)) for v in ns.bank_indices)
            sims = ",".join(repr(float(v)) for v in ns.sims[1:])
            print(f"query={i} indices=[{idx}] sims=[{sims}]")
        return 0
    entries = bank.entries()
    for i, q in enumerate(queries):
        if len(bank) < 2:
            raise ValueError("negative mode needs a bank with at least 2 entries")
        sims = entries @ q
        anchor = int(np.argmax(sims))
        cand_rows = np.delete(np.arange(len(bank)), anchor)
        mined = mine_negatives(
            q,
            float(sims[anchor]),
            entries[cand_rows],
            MiningConfig(a=args.a),
            rng.split("mine", i),
            query_id=i,
        )
        kept_bank = cand_rows[mined.kept]
        kept = ",".join(str(int(v)) for v in kept_bank)
        probs = ",".join(repr(float(v)) for v in mined.probs[mined.kept])
        print(f"query={i} anchor={anchor} kept=[{kept}] probs=[{probs}]")
    return 0


def cmd_ablate(args) -> int:
    base = TrainConfig(seed=args.seed)
    if args.epochs is not None:
        base = dataclasses.replace(base, epochs=args.epochs)
        if args.epochs < base.warmup_epochs:
            base = dataclasses.replace(base, warmup_epochs=max(args.epochs // 5, 0))
    if args.batch is not None:
        base = dataclasses.replace(base, batch_size=args.batch)
    cells = []
    for raw in args.values.split(","):
        raw = raw.strip()
        if args.axis == "strategy":
            cfg = dataclasses.replace(base, strategy=raw)
        elif args.axis == "k":
            cfg = dataclasses.replace(base, k=int(raw))
        elif args.axis == "a":
            cfg = dataclasses.replace(base, a=float(raw))
        else:
            cfg = dataclasses.replace(base, lam=float(raw))
        cfg.validate()
        cells.append((f"{args.axis}={raw}", cfg))
    train_ds, test_ds = _load_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation_suite(cells, train_ds, test_ds)
    table_path = out / "ablation.csv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("label,knn_acc,purity_top1,loss_total\n")
        for row in rows:
            cells_txt = [
                row["label"],
                "" if row["knn_acc"] is None else repr(row["knn_acc"]),
                "" if row["purity_top1"] is None else repr(row["purity_top1"]),
                "" if row["loss_total"] is None else repr(row["loss_total"]),
            ]
            fh.write(",".join(cells_txt) + "\n")
    for row in rows:
        print(f"{row['label']}: knn={row['knn_acc']} loss={row['loss_total']}")
    print(f"table written to {table_path}")
    return 0


def _add_data_args(p, required=True):
    group = p.add_mutually_exclusive_group(required=required)
    group.add_argument("--data", help="dataset CSV (split 80/20 by seed)")
    group.add_argument("--synthetic", help="generator spec, e.g. c4,d32,n512,sep6")


def build_parser() -> _Parser:
    parser = _Parser(prog="psm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train a model into a run directory")
    _add_data_args(p)
    p.add_argument("--config", help="JSON config file with TrainConfig keys")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int)
    p.add_argument("--a", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int, help="warmup epochs (defaults to 20)")
    p.add_argument("--bank", type=int)
    p.add_argument("--probe-every", dest="probe_every", type=int)
    p.add_argument("--strategy", choices=["V0", "V1", "V2", "V3", "V4"])
    p.add_argument("--span", choices=["with_view", "mined_only"])
    p.add_argument("--no-pnsm", action="store_true")
    p.add_argument("--no-soft", action="store_true")
    p.add_argument("--no-hard", action="store_true")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--symmetrize", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="score a checkpoint's embeddings")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--mode", choices=["knn", "linear"], default="knn")
    p.add_argument("--k-nn", dest="k_nn", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("diagnose", help="write purity or gradient-profile CSVs")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)
    p.add_argument("--what", choices=["purity", "gradients"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rank-depth", dest="rank_depth", type=int, default=200)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--bank", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("mine", help="one-shot mining against a bank dump")
    p.add_argument("--bank", required=True, help="bank file")
    p.add_argument("--query", required=True, help="query CSV (labels ignored)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--a", type=float, default=0.5)
    p.add_argument("--mode", choices=["positive", "negative"], default="positive")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("ablate", help="sweep one axis of the config grid")
    _add_data_args(p)
    p.add_argument("--axis", choices=["strategy", "k", "a", "lambda"], required=True)
    p.add_argument("--values", required=True, help="comma-separated cell values")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, _binio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
