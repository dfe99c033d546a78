"""Command-line entry points.

Subcommands: prepare-data, generate-candidates, compose-guidance, train,
evaluate, ablate.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .candidates import (
    OracleBackend,
    PretrainedBackend,
    consistency_score,
    generate_candidates,
    load_candidate_set,
    save_candidate_set,
    select_top_p,
)
from .evaluation import (
    ablation_run,
    evaluate_method,
    get_adapter,
    plot_report,
    write_report,
)
from .training import TrainConfig, infer_guidance, train

logger = logging.getLogger(__name__)

MASK_PRESETS = {"center50": 0.5, "center80": 0.8}


def _cmd_prepare_data(args) -> int:
    records = D.load_image_dir(args.input, resolution=args.resolution)
    out = Path(args.out)
    for i, record in enumerate(records):
        if args.mask in MASK_PRESETS:
            mask = D.make_center_box_mask(args.resolution, MASK_PRESETS[args.mask])
            mask.seed = args.seed + i
        else:
            mask = D.make_random_brush_mask(
                args.resolution, args.min_frac, args.max_frac, seed=args.seed + i
            )
        scene = D.apply_mask(record, mask)
        D.save_scene(scene, out / _safe_id(record.id))
    print(f"wrote {len(records)} scenes to {out}")
    return 0


def _safe_id(record_id: str) -> str:
    return record_id.replace("/", "_").replace("\\", "_").rsplit(".", 1)[0]


def _build_backend(name: str, scenes) -> object:
    if name == "oracle":
        gt_lookup = {s.image.id: s.image for s in scenes}
        return OracleBackend(gt_lookup)
    if name == "pretrained":
        return PretrainedBackend()
    raise SystemExit(f"unknown backend {name!r}")


def _cmd_generate_candidates(args) -> int:
    scenes = D.load_scene_dir(args.scenes)
    backend = _build_backend(args.backend, scenes)
    out = Path(args.out)
    for i, scene in enumerate(scenes):
        cands = generate_candidates(scene, backend, args.n, seed=args.seed + i)
        scores = [consistency_score(c, scene) for c in cands]
        cand_set = select_top_p(cands, scores, args.p)
        save_candidate_set(cand_set, out / _safe_id(scene.image.id))
    print(f"wrote candidate sets for {len(scenes)} scenes to {out}")
    return 0


def _cmd_compose_guidance(args) -> int:
    scene = D.load_scene(args.scene)
    cand_set = load_candidate_set(args.candidates)
    guide = infer_guidance(scene, cand_set, args.checkpoint, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    D.save_image_record(D.ImageRecord(id="guide", pixels=guide.pixels), out / "guide.png")
    from PIL import Image

    Image.fromarray((guide.filled * 255).astype(np.uint8), mode="L").save(out / "filled.png")
    Image.fromarray(((guide.chosen_index + 1) * 40).astype(np.uint8), mode="L").save(
        out / "chosen.png"
    )
    mean_scores = []
    for i, cand in enumerate(cand_set.selected):
        sel = guide.chosen_index == i
        mean_scores.append(
            {"candidate": i, "chosen_pixels": int(sel.sum()), "backend_id": cand.backend_id}
        )
    manifest = {
        "scene": scene.image.id,
        "filled_fraction": float(guide.filled.mean()),
        "residual_pixels": int((scene.mask.bits & (1 - guide.filled)).sum()),
        "per_candidate": mean_scores,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"guidance written to {out}")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    scenes = D.load_scene_dir(args.scenes)
    gts = [s.image for s in scenes]
    store = {}
    for scene in scenes:
        cand_dir = Path(args.candidates) / _safe_id(scene.image.id)
        store[scene.image.id] = load_candidate_set(cand_dir).selected
    result = train(config, scenes, gts, store, args.out, max_steps=args.max_steps)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"steps: {len(result.history)}, last total loss: {result.history[-1]['total']:.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    scenes = D.load_scene_dir(args.scenes)
    gts = D.load_image_dir(args.gt, resolution=scenes[0].resolution)
    outputs = D.load_image_dir(args.outputs, resolution=scenes[0].resolution)
    report = evaluate_method(outputs, gts, scenes, method_id=args.method)
    write_report([report], args.report)
    print(Path(args.report).read_text())
    return 0


def _cmd_ablate(args) -> int:
    config = TrainConfig.from_file(args.config)
    grid = json.loads(Path(args.grid).read_text())
    scenes = D.load_scene_dir(args.scenes)
    gts = [s.image for s in scenes]
    backend = _build_backend(args.backend, scenes)
    rows = ablation_run(
        config,
        grid,
        scenes,
        gts,
        backend,
        args.out,
        adapter=get_adapter(args.adapter),
        train_steps=args.train_steps,
    )
    report_path = Path(args.out) / "ablation_report.txt"
    write_report(rows, report_path)
    plot_report(rows, Path(args.out) / "ablation_report.png")
    print(report_path.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semguide")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="resize images and attach masks")
    p.add_argument("--input", required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--mask", choices=["center50", "center80", "brush"], default="center50")
    p.add_argument("--min-frac", type=float, default=0.5)
    p.add_argument("--max-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prepare_data)

    p = sub.add_parser("generate-candidates", help="complete, score, and select candidates")
    p.add_argument("--scenes", required=True)
    p.add_argument("--backend", choices=["oracle", "pretrained"], default="oracle")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate_candidates)

    p = sub.add_parser("compose-guidance", help="hard-mode guidance for one scene")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--candidates", required=True, help="candidate-set directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compose_guidance)

    p = sub.add_parser("train", help="optimize the guidance model")
    p.add_argument("--config", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score method outputs against ground truth")
    p.add_argument("--method", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--outputs", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="JSON mapping axis name to value list")
    p.add_argument("--scenes", required=True)
    p.add_argument("--backend", choices=["oracle", "pretrained"], default="oracle")
    p.add_argument("--adapter", default="identity")
    p.add_argument("--train-steps", type=int, default=60)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
