"""Command-line surface: train, segment, relations, synth.

All randomness flows from --seed; identical inputs and seed produce
byte-identical artifacts. Exit codes: 0 success, 1 usage, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor

from . import evaluation, relations
from .config import Config, load_config
from .errors import DataError, Error, NumericalError
from .imaging import (
    extract_features,
    compute_superpixels,
    labels_to_mask,
    load_image,
    save_image,
    save_mask_pgm,
)
from .latent import (
    TrainConfig,
    em_learn,
    make_instance,
    segment_instance,
)
from .linguistics import load_embeddings, parse_detections, semantic_segment
from .spt import (
    ExemplarMask,
    PhraseKey,
    SegmentPhraseTable,
    load_table,
    normalize_phrase,
    save_table,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="master RNG seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")
    parser.add_argument("--lambda", dest="lam", type=float, help="pairwise scale")
    parser.add_argument("--k", type=int, help="mixture components per model side")


def _resolve_config(args) -> Config:
    config = load_config(args.config) if args.config else Config()
    overrides = {
        "seed": args.seed,
        "lam": getattr(args, "lam", None),
        "gmm_k": getattr(args, "k", None),
        "ilp_lambda": getattr(args, "ilp_lambda", None),
        "paraphrase_tau": getattr(args, "tau", None),
    }
    fields = {k: v for k, v in overrides.items() if v is not None}
    if fields:
        config = dataclasses.replace(config, **fields)
    return config


def build_parser() -> _Parser:
    parser = _Parser(prog="segphrase", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn models from a box-annotated manifest")
    _add_common(p)
    p.add_argument("manifest", help="lines: phrase_quoted component image x0 y0 x1 y1")
    p.add_argument("out_table", help="output table file")

    p = sub.add_parser("segment", help="segment one image with table + embeddings")
    _add_common(p)
    p.add_argument("image", help="PGM/PPM image to segment")
    p.add_argument("detections", help="lines: phrase_quoted x0 y0 x1 y1 score")
    p.add_argument("table", help="trained table file")
    p.add_argument("embeddings", help="word-vector text file")
    p.add_argument("out_mask", help="output 0/255 PGM mask")

    p = sub.add_parser("relations", help="score phrase pairs from a table")
    _add_common(p)
    p.add_argument("mode", choices=("entail", "paraphrase", "simrel"))
    p.add_argument("dataset", help="tab-separated gold file")
    p.add_argument("out_csv", help="per-pair output CSV")
    p.add_argument("--table", help="trained table with exemplars")
    p.add_argument("--scores", help="score-matrix file (entail --graph only)")
    p.add_argument("--graph", action="store_true", help="solve the joint edge selection")
    p.add_argument("--ilp-lambda", dest="ilp_lambda", type=float, help="edge sparsity penalty")
    p.add_argument("--tau", type=float, help="paraphrase threshold")

    p = sub.add_parser("synth", help="generate synthetic scenes and manifests")
    _add_common(p)
    p.add_argument("out_dir", help="directory for scenes and manifests")
    p.add_argument("--count", type=int, default=5, help="training scenes")
    p.add_argument("--test-count", type=int, default=5, help="held-out scenes")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--fg", type=float, default=0.75)
    p.add_argument("--bg", type=float, default=0.25)
    p.add_argument("--shape", default="ellipse", choices=("ellipse", "rect", "blob"))
    p.add_argument("--phrase", default="synthetic object")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "train": cmd_train,
        "segment": cmd_segment,
        "relations": cmd_relations,
        "synth": cmd_synth,
    }[args.command]
    try:
        return handler(args)
    except (DataError, OSError) as exc:
        print(f"segphrase: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"segphrase: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Error as exc:
        print(f"segphrase: error: {exc}", file=sys.stderr)
        return EXIT_DATA


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def parse_train_manifest(path):
    """Grouped manifest: 'phrase_quoted component image-path x0 y0 x1 y1'.

    Returns [((phrase, component), [(image_path, box), ...])] preserving
    first-appearance group order.
    """
    groups: dict[tuple[str, int], list] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = shlex.split(line)
            if len(parts) != 7:
                raise DataError(
                    f"{path}:{lineno}: expected 'phrase component image x0 y0 x1 y1'"
                )
            try:
                component = int(parts[1])
                box = tuple(int(v) for v in parts[3:7])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer field") from exc
            groups.setdefault((parts[0], component), []).append((parts[2], box))
    if not groups:
        raise DataError(f"{path}: manifest is empty")
    return list(groups.items())


def _load_instance(path, box, target):
    img = load_image(path)
    graph = extract_features(img, compute_superpixels(img, target))
    return img, make_instance(graph, box)


def cmd_train(args) -> int:
    config = _resolve_config(args)
    groups = parse_train_manifest(args.manifest)
    table = SegmentPhraseTable(k_exemplars=config.k_exemplars)

    def load_group(entry):
        (_phrase, _component), items = entry
        return [
            _load_instance(path, box, config.superpixel_target)
            for path, box in items
        ]

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        loaded = list(pool.map(load_group, groups))

    for group_index, ((phrase, component), items) in enumerate(groups):
        pairs = loaded[group_index]
        instances = [inst for _img, inst in pairs]
        train_cfg = TrainConfig(
            k=config.gmm_k,
            max_iters=config.em_max_iters,
            seed=config.seed + group_index,
            lam=config.lam,
            seed_shrink=config.seed_shrink,
        )
        model = em_learn(instances, train_cfg)
        model.info.phrase = phrase
        model.info.component_id = component
        key = PhraseKey.make(phrase, component)
        table.insert(key, model)
        for (image_path, _box), (img, inst) in zip(items, pairs):
            labels = segment_instance(model, inst)
            descriptor = relations.exemplar_descriptor(
                img, labels_to_mask(labels, inst.graph.smap)
            )
            table.add_exemplar(
                phrase,
                ExemplarMask(image_path, 1.0, labels, descriptor),
            )
        log = {
            "phrase": key.phrase,
            "component": component,
            "instances": len(instances),
            "iterations": model.info.iterations,
            "final_energy": model.info.energy_history[-1]
            if model.info.energy_history
            else None,
        }
        print(json.dumps(log, sort_keys=True))
    save_table(table, args.out_table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------

def cmd_segment(args) -> int:
    config = _resolve_config(args)
    img = load_image(args.image)
    detections = parse_detections(args.detections)
    table = load_table(args.table)
    embeddings = load_embeddings(args.embeddings)
    result = semantic_segment(img, detections, table, embeddings, config)
    save_mask_pgm(result.mask, args.out_mask)
    for row in result.report:
        print(
            json.dumps(
                {
                    "phrase": row.phrase,
                    "score_before": row.score_before,
                    "score_after": row.score_after,
                },
                sort_keys=True,
            )
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# relations
# ---------------------------------------------------------------------------

def _curve_path(out_csv: str) -> str:
    stem, dot, ext = out_csv.rpartition(".")
    return f"{stem}.curve.{ext}" if dot else f"{out_csv}.curve"


def cmd_relations(args) -> int:
    config = _resolve_config(args)
    if args.scores:
        if args.mode != "entail" or not args.graph:
            raise DataError("--scores requires mode 'entail' with --graph")
        return _relations_from_scores(args, config)
    if not args.table:
        raise DataError("relations needs --table (or --scores with --graph)")
    table = load_table(args.table)
    cache: dict[str, relations.PhraseExemplars] = {}

    def phrase_exemplars(phrase):
        key = normalize_phrase(phrase)
        if key not in cache:
            cache[key] = relations.exemplars_from_table(table, phrase)
        return cache[key]

    rows = []
    scored = []
    if args.mode == "simrel":
        for x, y, z, gold in relations.parse_relations_dataset(args.dataset, "simrel"):
            ex, ey, ez = (phrase_exemplars(p) for p in (x, y, z))
            choice, s_y, s_z = relations.relative_similarity(ex, ey, ez)
            rows.append((x, y, z, s_y, s_z, choice.phrase))
            # declaration: positive margin declares y, gold says which is right
            scored.append((s_y - s_z, normalize_phrase(gold) == normalize_phrase(y)))
        header = "x,y,z,score_xy,score_xz,choice\n"
        lines = [
            f"{x},{y},{z},{sy!r},{sz!r},{c}\n" for x, y, z, sy, sz, c in rows
        ]
    else:
        graph_decisions = None
        pairs = relations.parse_relations_dataset(args.dataset)
        if args.mode == "entail" and args.graph:
            universe = []
            for x, y, _gold in pairs:
                for p in (x, y):
                    p = normalize_phrase(p)
                    if p not in universe:
                        universe.append(p)
            exemplars = [phrase_exemplars(p) for p in universe]
            mode = "exact" if len(universe) <= relations.EXACT_NODE_LIMIT else "greedy"
            graph = relations.build_entailment_graph(
                exemplars, config.ilp_lambda, mode
            )
            graph_decisions = {
                (graph.phrases[i], graph.phrases[j]): int(graph.decisions[i, j])
                for i in range(len(universe))
                for j in range(len(universe))
                if i != j
            }
        for p in sorted({normalize_phrase(p) for x, y, _g in pairs for p in (x, y)}):
            phrase_exemplars(p)  # warm the cache so pair scoring is read-only

        def score_pair(pair):
            x, y, gold = pair
            ex, ey = phrase_exemplars(x), phrase_exemplars(y)
            score = relations.entail_score(ex, ey)
            if args.mode == "paraphrase":
                margin = config.paraphrase_tau - abs(
                    score - relations.entail_score(ey, ex)
                )
                return (x, y, margin, int(margin >= 0)), (margin, gold == "paraphrase")
            if graph_decisions is not None:
                # diagonal decisions are fixed at 0 (a phrase never entails
                # itself in the decision matrix), so self-pairs bypass lookup
                decision = graph_decisions.get(
                    (normalize_phrase(x), normalize_phrase(y)), 0
                )
            else:
                decision = int(score > 0)
            return (x, y, score, decision), (score, gold == "entails")

        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            for row, tally in pool.map(score_pair, pairs):
                rows.append(row)
                scored.append(tally)
        header = "x,y,score,decision\n"
        lines = [f"{x},{y},{s!r},{d}\n" for x, y, s, d in rows]

    with open(args.out_csv, "w") as fh:
        fh.write(header)
        fh.writelines(lines)
    evaluation.write_curve_csv(
        evaluation.declaration_curve(scored), _curve_path(args.out_csv)
    )
    return EXIT_OK


def _relations_from_scores(args, config: Config) -> int:
    scores = relations.load_score_matrix(args.scores)
    n = len(scores)
    mode = "exact" if n <= relations.EXACT_NODE_LIMIT else "greedy"
    decisions = relations.solve_entailment_graph(scores, config.ilp_lambda, mode)
    with open(args.out_csv, "w") as fh:
        fh.write("x,y,score,decision\n")
        for i in range(n):
            for j in range(n):
                if i != j:
                    fh.write(f"{i},{j},{float(scores[i, j])!r},{int(decisions[i, j])}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    import os

    config = _resolve_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest_lines = []
    for split, count, offset in (
        ("train", args.count, 0),
        ("test", args.test_count, args.count),
    ):
        for i in range(count):
            scene_cfg = evaluation.SceneConfig(
                size=args.size,
                fg_shape=args.shape,
                fg_texture=args.fg,
                bg_texture=args.bg,
                noise=args.noise,
                seed=config.seed + offset + i,
            )
            scene = evaluation.make_scene(scene_cfg)
            img_path = os.path.join(args.out_dir, f"{split}_{i:03d}.pgm")
            gt_path = os.path.join(args.out_dir, f"{split}_{i:03d}_gt.pgm")
            save_image(scene.image, img_path)
            save_mask_pgm(scene.gt_mask, gt_path)
            if split == "train":
                x0, y0, x1, y1 = scene.box
                manifest_lines.append(
                    f'"{args.phrase}" 0 {img_path} {x0} {y0} {x1} {y1}\n'
                )
    with open(os.path.join(args.out_dir, "manifest.txt"), "w") as fh:
        fh.writelines(manifest_lines)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
