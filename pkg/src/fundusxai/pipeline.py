"""End-to-end pipeline stages wired over the library modules.

Each stage reads its inputs from the cohort/output directories, writes fixed
artifact names into the output directory and returns the list of paths it
produced. Stages are rerunnable: identical inputs produce byte-identical
outputs.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cohort, explain, imaging, metrics, synthgen, training, vesselseg
from .cohort import TASKS
from .config import TOOL_VERSION, PipelineConfig, config_to_dict
from .model import MultiTaskCNN, load_checkpoint, save_checkpoint


class MissingArtifact(FileNotFoundError):
    pass


SPLIT_CSV = "split.csv"
CHECKPOINT = "checkpoint.npz"
CHECKPOINT_SHUFFLED = "checkpoint_shuffled.npz"
TRAINLOG_CSV = "trainlog.csv"
TRAINLOG_SHUFFLED_CSV = "trainlog_shuffled.csv"
METRICS_CSV = "metrics.csv"
SCORES_CSV = "scores.csv"
MASKING_CSV = "masking_report.csv"
XAI_IOU_CSV = "xai_iou.csv"
XAI_IOU_SUMMARY = "xai_iou_summary.json"
XAI_IOU_SHUFFLED_CSV = "xai_iou_shuffled.csv"
XAI_IOU_SHUFFLED_SUMMARY = "xai_iou_shuffled_summary.json"
REPORT_JSON = "report.json"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {hint}: {path} (run the producing stage first)")
    return path


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# data loading


def load_manifest_records(cfg: PipelineConfig) -> list[cohort.ImageRecord]:
    manifest = _require(Path(cfg.cohort_dir) / "manifest.csv", "cohort manifest")
    return cohort.read_manifest(manifest)


def load_split(cfg: PipelineConfig) -> dict[str, str]:
    return cohort.read_split_csv(_require(_out(cfg) / SPLIT_CSV, "split assignment"))


def load_images(cfg: PipelineConfig, records: list[cohort.ImageRecord]) -> np.ndarray:
    """Decode and resize a record list to a uint8 (N, size, size, 3) stack."""
    imgs = [imaging.resize_bilinear(imaging.read_image(Path(cfg.cohort_dir) / r.image_path),
                                    cfg.input_size, cfg.input_size)
            for r in records]
    return np.stack(imgs) if imgs else np.zeros((0, cfg.input_size, cfg.input_size, 3), np.uint8)


def labels_matrix(records: list[cohort.ImageRecord]) -> np.ndarray:
    out = np.full((len(records), 3), np.nan)
    for i, r in enumerate(records):
        for t, task in enumerate(TASKS):
            v = r.label(task)
            if v is not None:
                out[i, t] = float(v)
    return out


def _resize_mask_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask
    ys = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
    xs = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
    return mask[ys][:, xs]


def load_region_masks(cfg: PipelineConfig, records, images: np.ndarray):
    """Per-image region masks from ground truth files or image-based estimates."""
    if cfg.region_source == "ground_truth":
        out = []
        for r in records:
            masks = {}
            for region in synthgen.REGIONS:
                path = synthgen.mask_path(cfg.cohort_dir, r.image_path, region)
                _require(path, f"ground-truth mask for {r.image_path}")
                masks[region] = _resize_mask_nearest(imaging.read_mask(path), cfg.input_size)
            out.append(masks)
        return out
    return _map_ordered(lambda img: explain.estimate_regions(img, cfg.seg),
                        list(images), cfg.threads)


def load_vessel_masks(cfg: PipelineConfig, records, images: np.ndarray):
    if cfg.region_source == "ground_truth":
        return [_resize_mask_nearest(
                    imaging.read_mask(_require(
                        synthgen.mask_path(cfg.cohort_dir, r.image_path, "vessel"),
                        f"vessel mask for {r.image_path}")),
                    cfg.input_size)
                for r in records]
    return _map_ordered(lambda img: vesselseg.segment_vessels(img, cfg.seg),
                        list(images), cfg.threads)


def test_records(cfg: PipelineConfig):
    records = load_manifest_records(cfg)
    assignment = load_split(cfg)
    return cohort.select_split(records, assignment, "test")


# ---------------------------------------------------------------------------
# stages


def run_synth(cfg: PipelineConfig) -> list[Path]:
    spec = cfg.cohort
    synthgen.generate_cohort(spec, cfg.cohort_dir, phantom=cfg.phantom)
    return [Path(cfg.cohort_dir) / "manifest.csv"]


def run_split(cfg: PipelineConfig) -> list[Path]:
    records = load_manifest_records(cfg)
    assignment = cohort.split_by_subject(records, cfg.split_fractions, cfg.split_seed)
    out = _out(cfg) / SPLIT_CSV
    cohort.write_split_csv(out, assignment)
    return [out]


def run_train(cfg: PipelineConfig, shuffle_labels: bool = False) -> list[Path]:
    records = load_manifest_records(cfg)
    assignment = load_split(cfg)
    if shuffle_labels:
        records = cohort.shuffle_subject_labels(records, cfg.seed)
    train_recs = cohort.select_split(records, assignment, "train")
    val_recs = cohort.select_split(records, assignment, "val")

    weights = cohort.compute_class_weights(train_recs)
    model = MultiTaskCNN.init(cfg.net, seed=cfg.seed)
    result = training.train(
        model,
        load_images(cfg, train_recs), labels_matrix(train_recs),
        load_images(cfg, val_recs), labels_matrix(val_recs),
        weights.weights, cfg.loss, cfg.optim,
        augment_params=cfg.augment, norm_stats=cfg.norm,
    )
    out = _out(cfg)
    ckpt = out / (CHECKPOINT_SHUFFLED if shuffle_labels else CHECKPOINT)
    logp = out / (TRAINLOG_SHUFFLED_CSV if shuffle_labels else TRAINLOG_CSV)
    save_checkpoint(ckpt, result.model)
    result.log.to_csv(logp)
    return [ckpt, logp]


def _load_model(cfg: PipelineConfig, shuffled: bool = False) -> MultiTaskCNN:
    name = CHECKPOINT_SHUFFLED if shuffled else CHECKPOINT
    return load_checkpoint(_require(_out(cfg) / name, "model checkpoint"))


def run_eval(cfg: PipelineConfig) -> list[Path]:
    model = _load_model(cfg)
    recs = test_records(cfg)
    if not recs:
        raise ValueError("test split is empty")
    images = load_images(cfg, recs)
    labels = labels_matrix(recs)
    tensors = np.stack([imaging.to_tensor_normalized(im, cfg.norm) for im in images])
    probs = training.predict_probs(model, tensors)

    out = _out(cfg)
    artifacts = [out / METRICS_CSV, out / SCORES_CSV]
    with open(out / METRICS_CSV, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "auc", "accuracy", "sensitivity", "specificity", "f1",
                         "auc_defined", "sensitivity_defined", "specificity_defined",
                         "f1_defined", "n", "n_positive"])
        for t, task in enumerate(TASKS):
            sel = ~np.isnan(labels[:, t])
            tm = metrics.confusion_metrics(labels[sel, t].astype(np.int64), probs[sel, t])
            writer.writerow([task, tm.auc, tm.accuracy, tm.sensitivity, tm.specificity,
                             tm.f1, int(tm.auc_defined), int(tm.sensitivity_defined),
                             int(tm.specificity_defined), int(tm.f1_defined),
                             tm.n, tm.n_positive])

    with open(out / SCORES_CSV, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "subject_id"]
                        + [f"prob_{t}" for t in TASKS] + [f"label_{t}" for t in TASKS])
        for i, r in enumerate(recs):
            writer.writerow([r.image_path, r.subject_id]
                            + [probs[i, t] for t in range(3)]
                            + ["" if r.label(task) is None else r.label(task)
                               for task in TASKS])

    for t, task in enumerate(TASKS):
        sel = ~np.isnan(labels[:, t])
        path = out / f"calibration_{task}.csv"
        artifacts.append(path)
        bins = metrics.reliability_bins(labels[sel, t].astype(np.int64), probs[sel, t])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_low", "bin_high", "count", "mean_pred", "obs_frac"])
            for b in range(len(bins.counts)):
                writer.writerow([bins.edges[b], bins.edges[b + 1], int(bins.counts[b]),
                                 bins.mean_pred[b], bins.obs_frac[b]])
    return artifacts


def run_explain(cfg: PipelineConfig) -> list[Path]:
    model = _load_model(cfg)
    recs = test_records(cfg)
    if cfg.explain_limit is not None:
        recs = recs[: cfg.explain_limit]
    images = load_images(cfg, recs)
    out = _out(cfg) / "explain"
    out.mkdir(exist_ok=True)

    def render(item):
        i, rec = item
        tensor = imaging.to_tensor_normalized(images[i], cfg.norm)
        stem = Path(rec.image_path).stem
        produced = []
        for task in TASKS:
            att = explain.compute_attention(model, tensor, task)
            base = out / f"attention_{task}_{stem}"
            explain.save_attention(base, att)
            overlay = explain.render_overlay(images[i], att)
            overlay_path = out / f"overlay_{task}_{stem}.png"
            imaging.write_image(overlay_path, overlay)
            produced += [Path(str(base) + ".png"), Path(str(base) + ".npy"), overlay_path]
        return produced

    results = _map_ordered(render, list(enumerate(recs)), cfg.threads)
    return [p for sub in results for p in sub]


def run_xai_iou(cfg: PipelineConfig, shuffled: bool = False) -> list[Path]:
    model = _load_model(cfg, shuffled=shuffled)
    recs = test_records(cfg)
    images = load_images(cfg, recs)
    vessel_masks = load_vessel_masks(cfg, recs, images)

    def one(item):
        i, rec = item
        tensor = imaging.to_tensor_normalized(images[i], cfg.norm)
        rows = []
        for task in TASKS:
            att = explain.compute_attention(model, tensor, task)
            pred = explain.threshold_attention(att, cfg.attention_threshold)
            iou, both_empty = explain.mask_iou(pred, vessel_masks[i])
            rows.append({"image_path": rec.image_path, "task": task, "iou": iou,
                         "both_empty": int(both_empty), "degenerate": int(att.degenerate)})
        return rows

    all_rows = [r for sub in _map_ordered(one, list(enumerate(recs)), cfg.threads)
                for r in sub]
    out = _out(cfg)
    csv_path = out / (XAI_IOU_SHUFFLED_CSV if shuffled else XAI_IOU_CSV)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", "task", "iou", "both_empty", "degenerate"])
        for row in all_rows:
            writer.writerow([row["image_path"], row["task"], row["iou"],
                             row["both_empty"], row["degenerate"]])

    summary = {"region_source": cfg.region_source,
               "attention_threshold": cfg.attention_threshold, "tasks": {}}
    for task in TASKS:
        ious = np.array([r["iou"] for r in all_rows if r["task"] == task])
        summary["tasks"][task] = {
            "mean_iou": float(ious.mean()),
            "sd_iou": float(ious.std(ddof=1)) if ious.size > 1 else 0.0,
            "n": int(ious.size),
        }
    summary_path = out / (XAI_IOU_SHUFFLED_SUMMARY if shuffled else XAI_IOU_SUMMARY)
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return [csv_path, summary_path]


def run_mask_exp(cfg: PipelineConfig) -> list[Path]:
    model = _load_model(cfg)
    recs = test_records(cfg)
    images = load_images(cfg, recs)
    labels = labels_matrix(recs)
    region_masks = load_region_masks(cfg, recs, images)
    report = explain.masking_experiment(model, images, labels, region_masks,
                                        region_source=cfg.region_source,
                                        norm_stats=cfg.norm)
    out = _out(cfg) / MASKING_CSV
    report.to_csv(out)
    return [out]


# ---------------------------------------------------------------------------
# report


def _read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def dataset_summary(records, assignment) -> dict:
    summary = {}
    for split in cohort.SPLITS:
        recs = cohort.select_split(records, assignment, split)
        entry = {"n_images": len(recs),
                 "n_subjects": len({r.subject_id for r in recs})}
        for task in TASKS:
            vals = [r.label(task) for r in recs if r.label(task) is not None]
            entry[f"n_labeled_{task}"] = len(vals)
            entry[f"prevalence_{task}"] = (sum(vals) / len(vals)) if vals else None
        summary[split] = entry
    return summary


def run_report(cfg: PipelineConfig) -> list[Path]:
    out = _out(cfg)
    records = load_manifest_records(cfg)
    assignment = load_split(cfg)
    metrics_rows = _read_csv_rows(_require(out / METRICS_CSV, "test metrics"))
    masking_rows = _read_csv_rows(_require(out / MASKING_CSV, "masking report"))
    with open(_require(out / XAI_IOU_SUMMARY, "attention IoU summary")) as fh:
        iou_summary = json.load(fh)
    trainlog_rows = _read_csv_rows(_require(out / TRAINLOG_CSV, "training log"))

    calibration = {}
    for task in TASKS:
        path = _require(out / f"calibration_{task}.csv", f"calibration bins for {task}")
        rows = _read_csv_rows(path)
        n = sum(int(r["count"]) for r in rows)
        ece = sum(int(r["count"]) / n * abs(float(r["mean_pred"]) - float(r["obs_frac"]))
                  for r in rows if int(r["count"]) > 0) if n else None
        calibration[task] = {"bins": rows, "ece": ece, "n": n}

    test_metrics = {}
    for row in metrics_rows:
        test_metrics[row["task"]] = {
            "auc": float(row["auc"]), "accuracy": float(row["accuracy"]),
            "sensitivity": float(row["sensitivity"]), "specificity": float(row["specificity"]),
            "f1": float(row["f1"]),
            "defined": {k: bool(int(row[f"{k}_defined"]))
                        for k in ("auc", "sensitivity", "specificity", "f1")},
            "n": int(row["n"]), "n_positive": int(row["n_positive"]),
        }

    deltas = [r for r in masking_rows if r["region"] != explain.CONTROL_REGION]
    control = [r for r in masking_rows if r["region"] == explain.CONTROL_REGION]
    report = {
        "tool_version": TOOL_VERSION,
        "config": config_to_dict(cfg),
        "dataset_summary": dataset_summary(records, assignment),
        "test_metrics": test_metrics,
        "iou_summary": iou_summary,
        "masking_deltas": deltas,
        "masking_control": control,
        "calibration": calibration,
    }
    report_path = out / REPORT_JSON
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    artifacts = [report_path]

    if cfg.report_figures:
        from . import figures
        artifacts += figures.render_report_figures(out, calibration, masking_rows,
                                                   trainlog_rows)
    return artifacts


def write_run_manifest(cfg: PipelineConfig, command: str, artifacts: list[Path],
                       seconds: float) -> Path:
    missing = [str(p) for p in artifacts if not Path(p).exists()]
    if missing:
        raise MissingArtifact(f"stage {command} declared artifacts it did not write: {missing}")
    manifest = {
        "command": command,
        "tool_version": TOOL_VERSION,
        "config": config_to_dict(cfg),
        "artifacts": sorted(str(p) for p in artifacts),
        "wall_time_s": seconds,
    }
    path = _out(cfg) / f"run_{command.replace('-', '_')}.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start
