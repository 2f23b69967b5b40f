"""Command-line pipeline: phantom -> edges -> sample -> train -> predict -> eval.

Every stage reads the config, consumes artifacts of earlier stages from
the output directory and writes its own artifacts plus a JSON manifest
under ``<output_dir>/manifests``.  Strategy-dependent stages write into
``<output_dir>/<strategy>/``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import ExitStack
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import __version__
from .config import Case, PipelineConfig, load_config
from .convnet import ConvNetModel, load_model, resolve_architecture, save_model, train
from .detector import (
    cluster_detections,
    load_detections,
    load_probability_map,
    predict_map,
    save_detections,
    save_probability_map,
)
from .edgemap import EdgeMap, extract_edges, load_edgemap, save_edgemap
from .errors import ConfigInvalidError, MissingUpstreamArtifactError, RunLockedError, SpineCadeError
from .evaluation import froc, match_detections, roc, summary, write_curve_csv, write_summary
from .patches import SamplingSource, Strategy, label_edges, load_patchset, sample_patches, save_patchset
from .phantom import PhantomSpec, generate
from .volume import load_annotations, load_volume, save_annotations, save_volume

log = logging.getLogger("spinecade")

STAGES = ("phantom", "edges", "sample", "train", "predict", "eval")
STRATEGY_STAGES = ("sample", "train", "predict", "eval")
ORDERING_MARGIN = 0.02


# --- layout -------------------------------------------------------------------

class Layout:
    def __init__(self, cfg: PipelineConfig):
        self.root = Path(cfg.output_dir)

    def case_dir(self, split: str, case_id: str) -> Path:
        return self.root / "data" / split / case_id

    def edges(self, case_id: str) -> Path:
        return self.root / "edges" / f"{case_id}.csv"

    def strategy_dir(self, strategy: Strategy) -> Path:
        return self.root / strategy.name.lower()

    def manifest(self, stage: str, strategy: Strategy | None = None) -> Path:
        name = stage if strategy is None else f"{stage}-{strategy.name.lower()}"
        return self.root / "manifests" / f"{name}.json"


def phantom_case_seed(seed: int, split: str, i: int) -> int:
    return int(np.random.SeedSequence([seed, 0 if split == "train" else 1, i]).generate_state(1)[0])


def cases(cfg: PipelineConfig) -> dict[str, list[Case]]:
    if cfg.cases is not None:
        return {split: list(cfg.cases[split]) for split in ("train", "test")}
    lay = Layout(cfg)
    out = {}
    for split, n in (("train", cfg.phantom.n_train), ("test", cfg.phantom.n_test)):
        out[split] = []
        for i in range(n):
            cid = f"{split}_{i:02d}"
            d = lay.case_dir(split, cid)
            out[split].append(Case(cid, str(d / "image.mhd"), str(d / "mask.mhd"), str(d / "annotations.csv")))
    return out


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingUpstreamArtifactError(f"{what} not found at {path}; run the earlier stage first")
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _relative(path, root: Path) -> str:
    path = Path(path)
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(path)


def write_manifest(cfg: PipelineConfig, stage: str, strategy, inputs, outputs, extra=None) -> None:
    lay = Layout(cfg)
    files = lambda paths: {_relative(p, lay.root): _sha256(p) for p in sorted(map(str, paths))}  # noqa: E731
    doc = {
        "stage": stage,
        "strategy": None if strategy is None else strategy.name.lower(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "inputs": files(inputs),
        "outputs": files(outputs),
    }
    if extra:
        doc.update(extra)
    path = lay.manifest(stage, strategy)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _volume_files(header) -> list[str]:
    return [str(header), str(Path(header).with_suffix(".raw"))]


# --- stages ---------------------------------------------------------------------

def cmd_phantom(cfg: PipelineConfig) -> None:
    if cfg.cases is not None:
        log.info("phantom: config lists explicit cases, nothing to generate")
        return
    outputs = []
    for split, items in cases(cfg).items():
        for i, case in enumerate(items):
            spec = PhantomSpec(**cfg.phantom.spec, seed=phantom_case_seed(cfg.seed, split, i), patient_id=case.id)
            img, mask, anns = generate(spec)
            Path(case.volume).parent.mkdir(parents=True, exist_ok=True)
            save_volume(img, case.volume)
            save_volume(mask, case.mask)
            save_annotations(anns, case.annotations)
            outputs += _volume_files(case.volume) + _volume_files(case.mask) + [case.annotations]
            log.info("phantom: %s with %d fractures", case.id, len(anns))
    write_manifest(cfg, "phantom", None, [], outputs)


def cmd_edges(cfg: PipelineConfig) -> None:
    lay = Layout(cfg)
    inputs, outputs = [], []
    for case in cases(cfg)["train"] + cases(cfg)["test"]:
        img = load_volume(_require(case.volume, f"volume of {case.id}"))
        mask = load_volume(_require(case.mask, f"mask of {case.id}"))
        edges = extract_edges(img, mask, cfg.edges.threshold_percentile)
        out = lay.edges(case.id)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_edgemap(edges, out)
        inputs += _volume_files(case.volume) + _volume_files(case.mask)
        outputs += [out, out.with_suffix(".json")]
        log.info("edges: %s has %d candidates", case.id, len(edges))
    write_manifest(cfg, "edges", None, inputs, outputs)


def _load_case(cfg, case: Case):
    lay = Layout(cfg)
    img = load_volume(_require(case.volume, f"volume of {case.id}"))
    edges = load_edgemap(_require(lay.edges(case.id), f"edge map of {case.id}"))
    anns = load_annotations(_require(case.annotations, f"annotations of {case.id}"), img)
    return img, edges, anns


def cmd_sample(cfg: PipelineConfig, strategy: Strategy) -> None:
    lay = Layout(cfg)
    s = cfg.sampling
    sources, inputs = [], []
    for case in cases(cfg)["train"]:
        img, edges, anns = _load_case(cfg, case)
        sources.append(SamplingSource(img, edges, anns))
        inputs += _volume_files(case.volume) + [lay.edges(case.id), case.annotations]
    ps = sample_patches(sources, strategy, s.target_count, s.pos_fraction, cfg.seed, s.radius_mm,
                        s.mirror_axis, s.orient_mode, s.window_radius)
    out = lay.strategy_dir(strategy) / "patches.p25d"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_patchset(ps, out)
    if ps.shortfall:
        log.warning("sample: %d positives short of the requested fraction", ps.shortfall)
    log.info("sample[%s]: %d positives, %d negatives", strategy.name.lower(), ps.positives, ps.negatives)
    extra = {"positives": ps.positives, "negatives": ps.negatives, "shortfall": ps.shortfall,
             "negative_shortfall": ps.negative_shortfall}
    write_manifest(cfg, "sample", strategy, inputs, [out], extra)


def cmd_train(cfg: PipelineConfig, strategy: Strategy) -> None:
    d = Layout(cfg).strategy_dir(strategy)
    patches = _require(d / "patches.p25d", "patch set")
    ps = load_patchset(patches)
    model = ConvNetModel.build(resolve_architecture(cfg.net), seed=cfg.seed)
    tag = strategy.name.lower()
    model, history = train(model, ps, cfg.train_config(),
                           log=lambda e: log.info("train[%s]: epoch %d loss %.4f acc %.4f", tag, e.epoch,
                                                  e.mean_loss, e.train_accuracy))
    save_model(model, d / "model.cnet")
    with open(d / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "train_accuracy"])
        for e in history:
            w.writerow([e.epoch, repr(e.mean_loss), repr(e.train_accuracy)])
    write_manifest(cfg, "train", strategy, [patches], [d / "model.cnet", d / "train_log.csv"])


def cmd_predict(cfg: PipelineConfig, strategy: Strategy) -> None:
    lay = Layout(cfg)
    d = lay.strategy_dir(strategy)
    model_path = _require(d / "model.cnet", "trained model")
    model = load_model(model_path)
    (d / "prob").mkdir(exist_ok=True)
    (d / "detections").mkdir(exist_ok=True)
    inputs, outputs = [model_path], []
    for case in cases(cfg)["test"]:
        img, edges, anns = _load_case(cfg, case)
        pmap = predict_map(model, img, edges, strategy, cfg.detect.batch_size,
                           cfg.sampling.window_radius, cfg.sampling.orient_mode)
        dets = cluster_detections(pmap, img, cfg.detect.cluster_threshold)
        for det, hit in zip(dets, match_detections(dets, anns, cfg.eval.match_radius_mm, cfg.eval.process_mode)):
            det.matched_annotation = hit
        save_probability_map(pmap, d / "prob" / f"{case.id}.csv")
        save_detections(dets, d / "detections" / f"{case.id}.csv")
        inputs += _volume_files(case.volume) + [lay.edges(case.id), case.annotations]
        outputs += [d / "prob" / f"{case.id}.csv", d / "detections" / f"{case.id}.csv"]
        log.info("predict[%s]: %s, %d detections", strategy.name.lower(), case.id, len(dets))
    write_manifest(cfg, "predict", strategy, inputs, outputs)


def evaluate_strategy(cfg: PipelineConfig, strategy: Strategy) -> dict:
    """ROC over test edge voxels and FROC over clustered detections."""
    d = Layout(cfg).strategy_dir(strategy)
    scores, labels, dets, anns, inputs = [], [], {}, {}, []
    for case in cases(cfg)["test"]:
        img = load_volume(_require(case.volume, f"volume of {case.id}"))
        a = load_annotations(_require(case.annotations, f"annotations of {case.id}"), img)
        prob_path = _require(d / "prob" / f"{case.id}.csv", f"probability map of {case.id}")
        det_path = _require(d / "detections" / f"{case.id}.csv", f"detections of {case.id}")
        pmap = load_probability_map(prob_path, img.dims)
        pseudo = EdgeMap(pmap.indices, np.zeros(len(pmap)), np.zeros(len(pmap)), np.zeros(len(pmap)), img.dims, 0.0)
        scores.append(pmap.probabilities)
        labels.append(label_edges(pseudo, a, img, cfg.sampling.radius_mm))
        dets[case.id] = load_detections(det_path)
        anns[case.id] = a
        inputs += [prob_path, det_path, case.annotations]
    roc_curve = roc(np.concatenate(scores), np.concatenate(labels))
    thresholds = [t for t in np.round(np.arange(1, 100) * 0.01, 2).tolist() if t >= cfg.detect.cluster_threshold]
    froc_curve = froc(dets, anns, cfg.eval.match_radius_mm, thresholds, cfg.eval.process_mode)
    result = summary(roc_curve, froc_curve, cfg.eval.fp_targets)
    write_curve_csv(roc_curve.fpr, roc_curve.tpr, d / "roc.csv")
    write_curve_csv(froc_curve.fp_per_patient, froc_curve.sensitivity, d / "froc.csv")
    write_summary(result, d / "summary.json")
    write_manifest(cfg, "eval", strategy, inputs, [d / "roc.csv", d / "froc.csv", d / "summary.json"])
    return result


def cmd_eval(cfg: PipelineConfig, strategy: Strategy) -> dict:
    result = evaluate_strategy(cfg, strategy)
    log.info("eval[%s]: auc %.4f, sens@5fp %.3f, sens@10fp %.3f", strategy.name.lower(), result["auc"],
             result["sens_at_5fp"], result["sens_at_10fp"])
    return result


def write_comparison(cfg: PipelineConfig, results: dict) -> str:
    """Side-by-side table of the strategies plus the ordering check."""
    lay = Layout(cfg)
    rows = [(s.name.lower(), r) for s, r in sorted(results.items())]
    lines = ["strategy,auc,sens_at_5fp,sens_at_10fp"]
    lines += [f"{name},{r['auc']!r},{r['sens_at_5fp']!r},{r['sens_at_10fp']!r}" for name, r in rows]
    (lay.root / "comparison.csv").write_text("\n".join(lines) + "\n")
    table = [f"{'strategy':<10} {'auc':>7} {'s@5fp':>7} {'s@10fp':>7}"]
    table += [f"{name:<10} {r['auc']:7.4f} {r['sens_at_5fp']:7.3f} {r['sens_at_10fp']:7.3f}" for name, r in rows]
    if Strategy.ORIENTED in results and Strategy.ORIGINAL in results:
        gap = results[Strategy.ORIENTED]["auc"] - results[Strategy.ORIGINAL]["auc"]
        verdict = "met" if gap >= ORDERING_MARGIN else "NOT MET"
        table.append(f"oriented - original auc = {gap:+.4f} (margin {ORDERING_MARGIN}: {verdict})")
    return "\n".join(table)


def run_stage(cfg: PipelineConfig, stage: str, strategies) -> dict:
    if stage == "phantom":
        cmd_phantom(cfg)
        return {}
    if stage == "edges":
        cmd_edges(cfg)
        return {}
    fn = {"sample": cmd_sample, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}[stage]
    results = {s: fn(cfg, s) for s in strategies}
    return results if stage == "eval" else {}


def cmd_run_all(cfg: PipelineConfig, strategies=None) -> dict:
    """All six stages in order; returns the eval summary per strategy."""
    strategies = [cfg.strategy] if strategies is None else list(strategies)
    results = {}
    for stage in STAGES:
        out = run_stage(cfg, stage, strategies)
        if stage == "eval":
            results = out
    return results


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinecade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON pipeline config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key; VALUE is parsed as JSON when possible")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--compare-strategies", action="store_true",
                       help="run strategy stages for original, mirrored and oriented")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS/OpenMP threads (default: $SPINECADE_THREADS, else library default)")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("SPINECADE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigInvalidError(f"SPINECADE_THREADS must be an integer, got {env!r}") from None
    return None


def _error_record(exc: BaseException) -> str:
    if isinstance(exc, SpineCadeError):
        kind = exc.kind
    elif isinstance(exc, OSError):
        kind = "IoError"
    else:
        kind = type(exc).__name__
    return json.dumps({"error": kind, "message": str(exc).replace("\n", " ")})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        threads = _threads(args.threads)
        if threads is not None and threads < 1:
            raise ConfigInvalidError("--threads must be >= 1")
        strategies = list(Strategy) if args.compare_strategies else [cfg.strategy]
        root = Path(cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        with ExitStack() as stack:
            try:
                stack.enter_context(FileLock(str(root / ".lock"), timeout=0))
            except Timeout:
                raise RunLockedError(f"another run holds {root / '.lock'}") from None
            if threads is not None:
                stack.enter_context(threadpool_limits(limits=threads))
            t0 = time.perf_counter()
            if args.command == "run-all":
                results = cmd_run_all(cfg, strategies)
            else:
                results = run_stage(cfg, args.command, strategies)
            log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        if results:
            for s, r in sorted(results.items()):
                print(json.dumps({"strategy": s.name.lower(), **r}, sort_keys=True))
            if len(results) > 1:
                print(write_comparison(cfg, results))
        return 0
    except (SpineCadeError, OSError, ValueError) as exc:
        print(_error_record(exc), file=sys.stderr)
        return 2 if isinstance(exc, ConfigInvalidError) else 1


if __name__ == "__main__":
    sys.exit(main())
