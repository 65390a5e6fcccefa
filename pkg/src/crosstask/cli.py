"""Command-line pipeline: ``crosstask refine | pseudomask | eval | overlay | losses``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 partial
completion (some records skipped). Worker count comes from ``CROSSTASK_WORKERS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .box_for_mask import BoxFillSegmenter, GrabCutSegmenter, filter_violations, make_pseudo_pair
from .evaluation import ERROR_TYPES, evaluate
from .formats import (
    BoxRecord,
    ConfigError,
    FormatError,
    ImageBoxes,
    RunConfig,
    atomic_write,
    parse_config,
    read_boxes,
    read_config,
    read_image,
    read_manifest,
    read_mask,
    read_tensor,
    write_boxes,
    write_image,
    write_mask,
)
from .geometry import SemanticMask
from .gradcheck import run_checks
from .losses import (
    KeyStore,
    attention_mse,
    ce_loss,
    combined_loss,
    mean_box_embedding,
    modulate,
    triplet_object_loss,
)
from .mask_for_box import Origin, origin_counts, refine_from_mask
from .overlay import render

log = logging.getLogger("crosstask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class _Outcome:
    image_id: str
    ok: bool
    counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def _workers() -> int:
    raw = os.environ.get("CROSSTASK_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"CROSSTASK_WORKERS must be an integer, got {raw!r}") from None


def _map(fn, items):
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        return list(pool.map(fn, items))


def _load_config(args) -> RunConfig:
    if args.config is None:
        if args.seed is None:
            raise UsageError("a --config file or --seed is required")
        return parse_config("", seed_override=args.seed)
    return read_config(args.config, args.seed)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out
    if out is None:
        raise UsageError("no output location: pass --out or set 'out' in the config")
    return Path(out)


def _image_entry(docs: list[ImageBoxes], image_id: str, source) -> ImageBoxes:
    for d in docs:
        if d.id == image_id:
            return d
    if len(docs) == 1:
        return docs[0]
    raise FormatError(f"{source}: no entry for image {image_id!r}")


def _write_summary(path: Path, outcomes: list[_Outcome], extra: dict) -> None:
    doc = {
        "processed": sorted(o.image_id for o in outcomes if o.ok),
        "failed": sorted(o.image_id for o in outcomes if not o.ok),
        **extra,
        "warnings": [w for o in sorted(outcomes, key=lambda o: o.image_id) for w in o.warnings],
    }
    atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))


def _status(outcomes: list[_Outcome]) -> int:
    if all(o.ok for o in outcomes):
        return EXIT_OK
    return EXIT_PARTIAL if any(o.ok for o in outcomes) else EXIT_DATA


# refine ---------------------------------------------------------------------

def cmd_refine(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    records = [r for r in read_manifest(args.manifest) if r.task_tag == "seg"]
    pred_dir = Path(args.predictions)

    def one(rec) -> _Outcome:
        res = _Outcome(rec.image_id, False)
        try:
            mask = read_mask(rec.mask_path)
            pred_path = pred_dir / f"{rec.image_id}.json"
            if pred_path.exists():
                entry = _image_entry(read_boxes(pred_path), rec.image_id, pred_path)
                if (entry.width, entry.height) != (mask.width, mask.height):
                    raise FormatError(f"{pred_path}: size {entry.width}x{entry.height} "
                                      f"differs from mask {mask.width}x{mask.height}")
                records_ = entry.boxes
            elif args.allow_missing:
                res.warnings.append(f"{rec.image_id}: no predictions, leftover boxes only")
                records_ = ()
            else:
                res.warnings.append(f"{rec.image_id}: missing predictions file, skipped")
                return res
            n = cfg.num_classes or max([*mask.categories(), *(b.category for b in records_),
                                        *(len(b.scores or ()) for b in records_), 1])
            refined = refine_from_mask(mask, [b.to_scored(n) for b in records_], cfg.refinement)
            doc = ImageBoxes(rec.image_id, mask.width, mask.height,
                             tuple(BoxRecord.from_refined(r) for r in refined))
            write_boxes([doc], out / f"{rec.image_id}.json")
            res.counts = origin_counts(refined)
            res.ok = True
        except (FormatError, ValueError) as exc:
            res.warnings.append(f"{rec.image_id}: {exc}")
        return res

    outcomes = _map(one, records)
    totals = {o.value: 0 for o in Origin}
    for o in outcomes:
        for k, v in o.counts.items():
            totals[k] += v
    _write_summary(out / "refine_summary.json", outcomes, {"origins": totals, "total": sum(totals.values())})
    for o in outcomes:
        for w in o.warnings:
            log.warning(w)
    print(f"refined {sum(o.ok for o in outcomes)}/{len(outcomes)} images; "
          + ", ".join(f"{k}={v}" for k, v in totals.items()))
    return _status(outcomes)


# pseudomask -----------------------------------------------------------------

def cmd_pseudomask(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    records = [r for r in read_manifest(args.manifest) if r.task_tag == "det"]
    grabcut = GrabCutSegmenter(cfg.grabcut_iters, cfg.grabcut_components, cfg.grabcut_lambda)

    def one(rec) -> _Outcome:
        res = _Outcome(rec.image_id, False)
        try:
            entry = _image_entry(read_boxes(rec.boxes_path), rec.image_id, rec.boxes_path)
            image, segmenter = None, BoxFillSegmenter()
            if cfg.segmenter == "grabcut":
                if rec.image_path is not None and rec.image_path.exists():
                    image, segmenter = read_image(rec.image_path), grabcut
                    if image.shape[:2] != (entry.height, entry.width):
                        raise FormatError(f"{rec.image_path}: image is {image.shape[1]}x{image.shape[0]}, "
                                          f"boxes say {entry.width}x{entry.height}")
                else:
                    res.warnings.append(f"{rec.image_id}: image missing, coarse mask is the box fill")
            pair = make_pseudo_pair(image, entry.ground_truth(), segmenter, cfg.seed, entry.width, entry.height)
            bad = filter_violations(pair)
            if bad:
                raise ValueError(f"{bad} coarse pixels outside every box")
            write_mask(pair.box_mask, out / f"{rec.image_id}_box.png")
            write_mask(pair.coarse_mask, out / f"{rec.image_id}_coarse.png")
            res.warnings.extend(f"{rec.image_id}: {w}" for w in pair.warnings)
            res.ok = True
        except (FormatError, ValueError) as exc:
            res.warnings.append(f"{rec.image_id}: {exc}")
        return res

    outcomes = _map(one, records)
    _write_summary(out / "pseudomask_summary.json", outcomes, {"segmenter": cfg.segmenter, "seed": cfg.seed})
    for o in outcomes:
        for w in o.warnings:
            log.warning(w)
    print(f"wrote pseudo-masks for {sum(o.ok for o in outcomes)}/{len(outcomes)} images")
    return _status(outcomes)


# eval -----------------------------------------------------------------------

def _load_box_set(path: Path) -> list[ImageBoxes]:
    if path.is_dir():
        docs = [d for p in sorted(path.glob("*.json")) if not p.name.endswith("_summary.json")
                for d in read_boxes(p)]
    else:
        docs = read_boxes(path)
    ids = [d.id for d in docs]
    if len(ids) != len(set(ids)):
        raise FormatError(f"{path}: duplicate image ids")
    return docs


def format_report(d: dict) -> str:
    lines = [f"mAP  {d['mAP']:.4f}" + ("  (no ground truth)" if d["mAP_undefined"] else "")]
    for t, per in d["AP"].items():
        mean = sum(per.values()) / len(per) if per else 0.0
        lines.append(f"  AP@{t}  {mean:.4f}")
    if d["mIOU"] is not None:
        lines.append(f"mIOU {d['mIOU']:.4f}")
    cols = list(ERROR_TYPES) + ["FP", "FN"]
    lines.append(" ".join(f"{c:>7}" for c in cols))
    tide = d["TIDE"]
    lines.append(" ".join(f"{tide[c] * 100:7.2f}" if c in ERROR_TYPES else f"{tide[c]:7d}" for c in cols))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    preds = _load_box_set(Path(args.predictions))
    gts = _load_box_set(Path(args.ground_truth))
    gt_ids = {g.id for g in gts}
    unknown = sorted({p.id for p in preds} - gt_ids)
    if unknown:
        raise FormatError(f"predictions for images missing from ground truth: {unknown}")
    num_classes = max([b.category for d in preds + gts for b in d.boxes] + [1])
    dets = {p.id: p.detections(num_classes) for p in preds}
    gt = {g.id: g.ground_truth() for g in gts}
    pm, gm = [], []
    if args.pred_masks or args.gt_masks:
        if not (args.pred_masks and args.gt_masks):
            raise UsageError("--pred-masks and --gt-masks go together")
        for gid in sorted(gt_ids):
            gpath = Path(args.gt_masks) / f"{gid}.png"
            if not gpath.exists():
                continue
            ppath = Path(args.pred_masks) / f"{gid}.png"
            if not ppath.exists():
                raise FormatError(f"missing predicted mask for {gid}")
            gm.append(read_mask(gpath))
            pm.append(read_mask(ppath))
    report = evaluate(dets, gt, pm, gm).to_dict()
    print(format_report(report))
    if args.out:
        atomic_write(args.out, (json.dumps(report, indent=2, sort_keys=False) + "\n").encode("utf-8"))
    return EXIT_OK


# overlay --------------------------------------------------------------------

def cmd_overlay(args) -> int:
    image = read_image(args.image)
    h, w = image.shape[:2]
    boxes = []
    if args.boxes:
        docs = read_boxes(args.boxes)
        entry = docs[0] if len(docs) == 1 else _image_entry(docs, Path(args.image).stem, args.boxes)
        if (entry.width, entry.height) != (w, h):
            raise FormatError(f"boxes are for {entry.width}x{entry.height}, image is {w}x{h}")
        boxes = [(b.box, b.origin) for b in entry.boxes]
    mask = None
    if args.mask:
        mask = read_mask(args.mask)
        if mask.shape != (h, w):
            raise FormatError(f"mask is {mask.width}x{mask.height}, image is {w}x{h}")
    if args.out is None:
        raise UsageError("overlay needs --out")
    write_image(render(image, boxes, mask), args.out)
    return EXIT_OK


# losses ---------------------------------------------------------------------

def _read_keys(path, capacity) -> KeyStore:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        store = KeyStore(capacity)
        for k in doc["keys"]:
            store.add(np.array(k["vector"], dtype=np.float64), int(k["category"]))
        return store
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad keys file ({exc})") from exc


def cmd_losses(args) -> int:
    cfg = _load_config(args)
    lam = cfg.lam if args.lam is None else args.lam
    if not (math.isfinite(lam) and lam >= 0):
        raise UsageError("--lambda must be a non-negative number")
    logits = read_tensor(args.logits)
    alpha = read_tensor(args.alpha)
    if logits.shape != alpha.shape:
        raise FormatError(f"logits {logits.shape} and alpha {alpha.shape} differ")
    h, w, _ = logits.shape
    coarse = read_mask(args.coarse_mask) if args.coarse_mask else SemanticMask.zeros(w, h)
    box_mask = read_mask(args.box_mask) if args.box_mask else SemanticMask.zeros(w, h)
    for m, name in ((coarse, "coarse mask"), (box_mask, "box mask")):
        if m.shape != (h, w):
            raise FormatError(f"{name} is {m.width}x{m.height}, tensors are {w}x{h}")
    merged = modulate(logits, alpha)
    l_s, _ = ce_loss(merged, coarse)
    l_alpha, _ = attention_mse(alpha, box_mask)
    l_object = 0.0
    if args.embeddings and args.boxes:
        z = read_tensor(args.embeddings)
        if z.shape[:2] != (h, w):
            raise FormatError("embedding field size differs from the logits")
        entry = read_boxes(args.boxes)[0]
        queries = []
        for box, cat in entry.ground_truth():
            q = mean_box_embedding(z, merged, box, cat)
            if q is not None:
                queries.append((q, cat))
        store = _read_keys(args.keys, cfg.key_capacity) if args.keys else KeyStore(cfg.key_capacity)
        l_object, _ = triplet_object_loss(queries, store, cfg.gamma)
    parts = combined_loss(args.l_det, args.l_m4b, args.l_seg, l_s, l_alpha, l_object, lam)
    report = {
        "l_det_supervised": parts.l_det_supervised, "l_m4b": parts.l_m4b,
        "l_seg_supervised": parts.l_seg_supervised, "l_s": parts.l_s, "l_alpha": parts.l_alpha,
        "l_object": parts.l_object, "lambda": parts.lam, "total": parts.total,
    }
    status = EXIT_OK
    if args.check_grads:
        checks = run_checks(cfg.seed)
        report["grad_check"] = {k: {"cases": n, "max_rel_error": e} for k, (n, e) in checks.items()}
        if any(e >= 1e-5 for _, e in checks.values()):
            status = EXIT_DATA
    for k, v in report.items():
        if k == "grad_check":
            for name, r in v.items():
                print(f"grad {name:<20} cases={r['cases']} max_rel_error={r['max_rel_error']:.3e}")
        else:
            print(f"{k:<17} {v:.6f}")
    if args.out:
        atomic_write(args.out, (json.dumps(report, indent=2) + "\n").encode("utf-8"))
    return status


# entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crosstask", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key = value run configuration")
            p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory or file")

    p = sub.add_parser("refine", help="refine mask-derived boxes with detector predictions")
    p.add_argument("manifest")
    p.add_argument("predictions", help="directory holding <image_id>.json box documents")
    p.add_argument("--allow-missing", action="store_true",
                   help="treat a missing predictions file as no predictions")
    common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("pseudomask", help="build box-shaped and coarse masks from boxes")
    p.add_argument("manifest")
    common(p)
    p.set_defaults(func=cmd_pseudomask)

    p = sub.add_parser("eval", help="mAP, mIOU and the error breakdown")
    p.add_argument("predictions", help="box document or directory of them")
    p.add_argument("ground_truth", help="box document or directory of them")
    p.add_argument("--pred-masks", help="directory of <image_id>.png predicted masks")
    p.add_argument("--gt-masks", help="directory of <image_id>.png ground-truth masks")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="draw boxes and masks over an image")
    p.add_argument("image")
    p.add_argument("--boxes")
    p.add_argument("--mask")
    common(p, config=False)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("losses", help="evaluate the segmentation-side losses on tensor files")
    p.add_argument("--logits", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--boxes", help="ground-truth boxes for the object loss")
    p.add_argument("--keys", help='JSON {"keys": [{"category": c, "vector": [...]}]}')
    p.add_argument("--coarse-mask")
    p.add_argument("--box-mask")
    p.add_argument("--l-det", type=float, default=0.0)
    p.add_argument("--l-m4b", type=float, default=0.0)
    p.add_argument("--l-seg", type=float, default=0.0)
    p.add_argument("--lambda", dest="lam", type=float, help="overrides the config lambda")
    p.add_argument("--check-grads", action="store_true")
    common(p)
    p.set_defaults(func=cmd_losses)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"crosstask: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"crosstask: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
