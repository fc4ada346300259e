"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable/malformed
files, missing supervision), 3 numeric failure (non-finite values).
Config files are JSON documents whose keys mirror TrainConfig; explicit
flags override file values, which override defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .bags import (BagFormatError, SyntheticSpec, generate_bag, inspect_header,
                   load_dataset, read_bagemb, write_bagemb, write_manifest)
from .clustering import dec_fit
from .numerics import ContractError
from .selection import SelectorParams, select_representatives
from .simgraph import build_graph, to_adjacency_json, to_dot
from .training import (TrainConfig, evaluate, load_checkpoint,
                       model_from_checkpoint, save_checkpoint, train)

_WIDTH = 96


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    # None is the "flag not given" sentinel; listing it as a default is noise
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _fmt(prog):
    return _Formatter(prog, width=_WIDTH)


_CONFIG_FLAGS = [
    ("--task", "task", str, "training task (classify or caption)"),
    ("--lr", "lr", float, "learning rate"),
    ("--weight-decay", "weight_decay", float, "decoupled weight decay"),
    ("--dropout", "dropout", float, "attention dropout rate"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-size", "batch_size", int, "bags per optimizer step"),
    ("--k", "K", int, "clusters per bag"),
    ("--tau", "tau", float, "edge Gumbel temperature"),
    ("--m-neighbors", "m_neighbors", int, "neighbors per node"),
    ("--lambda-clu", "lambda_clu", float, "clustering loss weight"),
    ("--seed", "seed", int, "master RNG seed"),
    ("--d-out", "d_out", int, "attention stack hidden width"),
    ("--jobs", "jobs", int, "parallel per-bag workers"),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config file mirroring TrainConfig")
    defaults = TrainConfig()
    for flag, name, typ, help_text in _CONFIG_FLAGS:
        p.add_argument(flag, type=typ, default=None,
                       help=f"{help_text} (config default: "
                            f"{getattr(defaults, name)})")


def _resolve_config(args) -> TrainConfig:
    doc: dict = {}
    if args.config is not None:
        loaded = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise BagFormatError(
                f"{args.config}: unknown config keys {sorted(unknown)}")
        doc.update(loaded)
    for _, name, _, _ in _CONFIG_FLAGS:
        val = getattr(args, name if name != "K" else "k")
        if val is not None:
            doc[name] = val
    return TrainConfig.from_dict(doc)


def build_parser() -> _Parser:
    root = _Parser(prog="graphmil", formatter_class=_fmt,
                   description="Bag-of-embeddings classification and "
                               "captioning over similarity graphs.")
    sub = root.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", formatter_class=_fmt,
                       help="generate a synthetic bag dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--bags", type=int, default=40, help="number of bags")
    p.add_argument("--regions", type=int, default=5, help="regions per bag")
    p.add_argument("--copies", type=int, default=4,
                   help="near-duplicate captures per region")
    p.add_argument("--d-v", type=int, default=32, help="embedding dimension")
    p.add_argument("--separation", type=float, default=3.0,
                   help="minimum distance between region centroids")
    p.add_argument("--sigma", type=float, default=0.1,
                   help="capture noise std dev")
    p.add_argument("--positive-prob", type=float, default=0.13,
                   help="per-region malignancy probability")
    p.add_argument("--test-fraction", type=float, default=0.2,
                   help="fraction of bags tagged as the test split")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed")

    p = sub.add_parser("train", formatter_class=_fmt,
                       help="train the pipeline on a manifest dataset")
    p.add_argument("--data", type=Path, required=True, help="manifest path")
    p.add_argument("--split", default="train", help="split tag to train on")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None,
                   help="training log path (default: <out>.log.json)")
    _add_config_flags(p)

    p = sub.add_parser("eval", formatter_class=_fmt,
                       help="evaluate a checkpoint on a split")
    p.add_argument("--data", type=Path, required=True, help="manifest path")
    p.add_argument("--split", default="test", help="split tag to evaluate")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None,
                   help="write the JSON report here as well")

    p = sub.add_parser("cluster", formatter_class=_fmt,
                       help="dump soft assignments for one bag")
    p.add_argument("--bag-file", type=Path, required=True, help=".bagemb path")
    p.add_argument("--k", type=int, default=8, help="clusters")
    p.add_argument("--out", type=Path, default=None,
                   help="JSON output path (default: stdout)")

    p = sub.add_parser("select", formatter_class=_fmt,
                       help="dump per-cluster scores and chosen patches")
    p.add_argument("--bag-file", type=Path, required=True, help=".bagemb path")
    p.add_argument("--k", type=int, default=8, help="clusters")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="take selector weights from this checkpoint")
    p.add_argument("--seed", type=int, default=0,
                   help="selector init seed when no checkpoint is given")
    p.add_argument("--out", type=Path, default=None,
                   help="JSON output path (default: stdout)")

    p = sub.add_parser("graph-export", formatter_class=_fmt,
                       help="write DOT and adjacency JSON for one bag")
    p.add_argument("--bag-file", type=Path, required=True, help=".bagemb path")
    p.add_argument("--k", type=int, default=8, help="clusters")
    p.add_argument("--m-neighbors", type=int, default=1)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="take selector weights from this checkpoint")
    p.add_argument("--seed", type=int, default=0,
                   help="selector init seed when no checkpoint is given")
    p.add_argument("--dot", type=Path, required=True, help="DOT output path")
    p.add_argument("--json", type=Path, required=True,
                   help="adjacency JSON output path")

    p = sub.add_parser("caption", formatter_class=_fmt,
                       help="greedy-decode a caption for one bag")
    p.add_argument("--bag-file", type=Path, required=True, help=".bagemb path")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0, help="sampling seed")

    p = sub.add_parser("inspect", formatter_class=_fmt,
                       help="pretty-print a .bagemb header")
    p.add_argument("file", type=Path, help=".bagemb path")

    return root


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_synth(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(args.bags * args.test_fraction))
    entries = []
    for i in range(args.bags):
        spec = SyntheticSpec(region_count=args.regions,
                             copies_per_region=args.copies,
                             d_v=args.d_v,
                             region_separation=args.separation,
                             noise_sigma=args.sigma,
                             positive_region_prob=args.positive_prob,
                             seed=args.seed + i)
        bag, _ = generate_bag(spec)
        name = f"bag_{i:04d}.bagemb"
        write_bagemb(bag, args.out / name)
        split = "test" if i >= args.bags - n_test else "train"
        entries.append({"path": name, "split": split, "tags": {}})
    write_manifest(args.out / "manifest.json", args.d_v, entries)
    print(f"wrote {args.bags} bags + manifest to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    dataset = load_dataset(args.data, split=args.split)
    ckpt, log = train(dataset, config)
    save_checkpoint(ckpt, args.out)
    log_path = args.log or args.out.with_suffix(args.out.suffix + ".log.json")
    Path(log_path).write_text(json.dumps(log, indent=2) + "\n")
    last = log[-1]
    print(f"trained {config.epochs} epochs; "
          f"final total loss {last['total']:.6f}; checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data, split=args.split)
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate(dataset, ckpt)
    if args.report is not None:
        args.report.write_text(report.to_json())
    sys.stdout.write(report.to_json())
    sys.stdout.write(report.to_table())
    return 0


def _cmd_cluster(args) -> int:
    bag = read_bagemb(args.bag_file)
    state = dec_fit(bag.embeddings, K=args.k)
    doc = {
        "patient_id": bag.patient_id,
        "K": state.K,
        "n_iters": state.n_iters,
        "initial_loss": state.initial_loss,
        "final_loss": state.final_loss,
        "centroids": state.centroids.data.tolist(),
        "Q": state.Q.data.tolist(),
        "T": state.T.data.tolist(),
        "hard_assignments": state.hard_assignments().tolist(),
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out is not None:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _selector_weights(args, d_v):
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        return (ckpt.params["selector.wq"], ckpt.params["selector.wk"],
                ckpt.params["selector.wv"])
    p = SelectorParams.init(np.random.default_rng(args.seed), d_v)
    return p.w_query, p.w_key, p.w_value


def _selection_for(args):
    bag = read_bagemb(args.bag_file)
    state = dec_fit(bag.embeddings, K=args.k)
    wq, wk, wv = _selector_weights(args, bag.d_v)
    sel = select_representatives(bag.embeddings, state.hard_assignments(),
                                 wq, wk, wv)
    return bag, sel


def _cmd_select(args) -> int:
    bag, sel = _selection_for(args)
    doc = {
        "patient_id": bag.patient_id,
        "clusters": [{
            "cluster_id": c.cluster_id,
            "members": list(c.members),
            "alpha": c.alpha.tolist(),
            "scores": c.scores.tolist(),
            "representative": c.representative,
        } for c in sel.choices],
        "representative_indices": list(sel.representative_indices),
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out is not None:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_graph_export(args) -> int:
    _, sel = _selection_for(args)
    graph = build_graph(sel.representatives, mode="eval",
                        m_neighbors=args.m_neighbors)
    args.dot.write_text(to_dot(graph))
    args.json.write_text(to_adjacency_json(graph))
    print(f"wrote {args.dot} and {args.json}")
    return 0


def _cmd_caption(args) -> int:
    bag = read_bagemb(args.bag_file)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.task != "caption":
        raise ContractError("checkpoint was not trained for captioning")
    model = model_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed) if args.mode == "sample" else None
    print(model.generate_caption(bag, mode=args.mode,
                                 temperature=args.temperature, rng=rng))
    return 0


def _cmd_inspect(args) -> int:
    doc = inspect_header(args.file)
    for key in ("path", "patient_id", "n_patches", "d_v", "label", "caption"):
        print(f"{key}: {doc[key]}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "cluster": _cmd_cluster,
    "select": _cmd_select,
    "graph-export": _cmd_graph_export,
    "caption": _cmd_caption,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (BagFormatError, ContractError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
