"""Command-line entry point: ``marecg <command> ...``.

Exit codes: 0 success, 1 validation or audit failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_overrides
from .ingest import (HeaderError, parse_header, preprocess, read_corpus, synth_corpus, write_corpus)
from .ontology import (GraphFormatError, build_graph, distance_csv, floyd_warshall, load_graph, save_graph,
                       tree_distance)
from .physio import TARGET_CSV_HEADER, rhythm_targets, target_csv_row
from .snomed import RoutingError, default_routing, load_routing, resolve_codes

log = logging.getLogger("marecg")


class Failure(Exception):
    """Validation or audit failure reported with exit code 1."""


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.tiny()
    return cfg.with_overrides(parse_overrides(getattr(args, "set", None)))


# -- graph -------------------------------------------------------------------------


def cmd_graph(args) -> int:
    canonical = build_graph()
    if args.action == "export":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_graph(canonical, out / "graph.txt")
        (out / "distance.csv").write_text(distance_csv(canonical.distance), encoding="utf-8", newline="\n")
        print(f"wrote {out / 'graph.txt'} and {out / 'distance.csv'}")
        return 0
    try:
        graph = load_graph(args.graph) if args.graph else canonical
    except (GraphFormatError, OSError) as exc:
        raise Failure(f"cannot load graph: {exc}") from exc
    D_bfs = tree_distance(graph.adjacency)
    D_fw = floyd_warshall(graph.adjacency)
    for name, D in (("bfs", D_bfs), ("floyd-warshall", D_fw)):
        diff = np.argwhere(D != canonical.distance)
        if diff.size:
            i, j = diff[0]
            raise Failure(f"{name} distance differs from canonical at ({i}, {j}): "
                          f"{D[i, j]} != {canonical.distance[i, j]}")
    print(f"graph audit ok: {graph.n_nodes} nodes, {graph.n_edges} edges, max distance {int(D_bfs.max())}")
    return 0


# -- map ---------------------------------------------------------------------------------


def cmd_map(args) -> int:
    try:
        header = parse_header(Path(args.header).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, HeaderError) as exc:
        raise Failure(f"cannot read header: {exc}") from exc
    graph = build_graph()
    table = load_routing(args.routing) if args.routing else default_routing(graph)
    target = resolve_codes(header.codes, table, graph, args.rule)
    print(f"record: {header.record_name}")
    print(f"codes: {' '.join(map(str, header.codes))}")
    print(f"routed: {' '.join(map(str, sorted(target.routed)))}")
    print(f"active_leaves: {' '.join(map(str, target.active))}")
    print(f"primary: {'' if target.primary is None else target.primary}")
    print(f"root_only: {str(target.root_only).lower()}")
    return 0


# -- corpus commands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    records = synth_corpus(args.n, args.seed, args.length, noise_snr_db=args.snr)
    write_corpus(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_extract_targets(args) -> int:
    cfg = _config(args)
    rows = []
    for rec in read_corpus(args.corpus):
        pre = preprocess(rec, cfg.window, cfg.amp_bound, cfg.saturation_run, cfg.zero_fraction)
        rt = rhythm_targets(pre.rpeaks, cfg.fs, cfg.brady_bpm, cfg.tachy_bpm, cfg.theta_alt, cfg.nu_alt)
        rows.append(target_csv_row(rec.id, rt))
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(TARGET_CSV_HEADER)
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _load_records(args, cfg: RunConfig):
    records = read_corpus(args.corpus)
    return [preprocess(r, cfg.window, cfg.amp_bound, cfg.saturation_run, cfg.zero_fraction) for r in records]


def cmd_pretrain(args) -> int:
    from .trainer import train

    cfg = _config(args).replace(ablation=args.ablation)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    records = _load_records(args, cfg)
    result = train(cfg, records, out_dir=args.out, max_steps=args.steps or None)
    print(f"trained {result.steps} steps ({cfg.ablation}), skipped {result.skipped}, "
          f"final total {result.ledger[-1]['total']:.6f}; checkpoints in {args.out}")
    return 0


def cmd_probe(args) -> int:
    from .probe import LinearProbe, dumps_results, extract_features, run_probe
    from .trainer import load_model

    model, _ = load_model(args.checkpoint)
    records = _load_records(args, model.cfg)
    labels = [r.meta.get("label") for r in records]
    if any(lab is None for lab in labels):
        raise Failure("every probe record needs a Label comment")
    classes = sorted(set(labels))
    Y = np.array([[lab == c for c in classes] for lab in labels], dtype=np.uint8)
    features = extract_features(model, records)
    rows = run_probe(features, Y, classes, fractions=args.fractions, seeds=args.seeds, task=args.task,
                     probe=LinearProbe(l2=model.cfg.probe_l2))
    text = dumps_results(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .audit import HEADS, TOLERANCE, audit_head

    heads = HEADS if args.head == "all" else (args.head,)
    worst = 0.0
    for head in heads:
        result = audit_head(head, seed=args.seed)
        worst = max(worst, result.max_rel_error)
        print(f"{head}: max_rel_error={result.max_rel_error:.3e} coords={result.n_checked}")
    if worst > TOLERANCE:
        raise Failure(f"gradient check failed: {worst:.3e} > {TOLERANCE:g}")
    return 0


# -- parser --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .audit import HEADS

    parser = argparse.ArgumentParser(prog="marecg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value configuration file (default: tiny preset)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = sub.add_parser("graph", help="export or audit the concept graph")
    p.add_argument("action", choices=("export", "audit"))
    p.add_argument("--out", default=".", help="export directory")
    p.add_argument("--graph", help="graph file to audit (default: canonical build)")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("map", help="route a header's diagnosis codes")
    p.add_argument("--header", required=True)
    p.add_argument("--routing", help="routing file (default: shipped table)")
    p.add_argument("--rule", choices=("max_index", "isa_depth"), default="max_index")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("synth", help="write a synthetic labelled corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=5000, help="samples per record at 500 Hz")
    p.add_argument("--snr", type=float, default=None, help="additive noise SNR in dB")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("extract-targets", help="rhythm targets CSV for a corpus"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract_targets)

    p = with_config(sub.add_parser("pretrain", help="pretrain one ablation column"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--ablation", choices=("C1", "C2p", "C2", "C3"), default="C3")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, default=0, help="optimizer steps (default: full epoch budget)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--fractions", type=float, nargs="+", default=[1.0, 0.1, 0.01])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--task", default="synthetic")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="float64 finite-difference audit of a loss head")
    p.add_argument("--head", choices=HEADS + ("all",), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (Failure, RoutingError, HeaderError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
