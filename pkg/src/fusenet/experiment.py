"""End-to-end experiment runner: data -> modality pretraining -> fusion
heads -> metrics, checkpoints, CMC plot and summary table."""
import logging
import os
import shutil
import traceback
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

from .config import ExperimentConfig, load_config
from .estimators import FusionNetClassifier, ModalityCNNClassifier
from .fusion import FusionHead, FusionNetwork
from .metrics import CMCResult, aggregate_runs, cmc_curve, emit_cmc_plot, rank_one_accuracy, read_metrics_csv, \
    write_metrics_csv
from .modality import ModalityNetwork
from .synthdata import _manifest, generate_dataset, normalize_channels, sample_tuples, save_snapshot
from .tensor import load_checkpoint, save_checkpoint
from .train import predict_proba

log = logging.getLogger(__name__)


def build_data(cfg: ExperimentConfig, seed: int):
    d = cfg.dataset
    ds = generate_dataset(d.subjects, d.modalities, d.samples_per_subject, d.profiles, seed, d.image_shape,
                          d.separation, d.dual_template, dtype=np.dtype(cfg.dtype))
    if d.normalize:
        ds, _ = normalize_channels(ds)
    tuples = sample_tuples(ds, d.tuples_per_subject, seed=seed)
    return ds, tuples


def _curve_names(cfg: ExperimentConfig) -> List[str]:
    names = []
    for k in cfg.kinds:
        if k == "unimodal":
            names.extend(f"unimodal_{m}" for m in cfg.dataset.modalities)
        else:
            names.append(k)
    return names


def _pretrain(cfg, ds, seed, run_dir) -> Dict[str, ModalityCNNClassifier]:
    out = {}
    for k, m in enumerate(cfg.dataset.modalities):
        aug = cfg.augment if m in cfg.dataset.augment else None
        est = ModalityCNNClassifier(cfg.networks[m], replace(cfg.pretrain[m], seed=seed), aug, cfg.dtype,
                                    random_state=seed * 10 + k)
        est.fit(ds.images["train"][m], ds.labels["train"][m])
        est.log_.to_csv(os.path.join(run_dir, f"log_unimodal_{m}.csv"))
        save_checkpoint(os.path.join(run_dir, f"unimodal_{m}.ckpt"), est.net_.state_dict())
        log.info("seed %d: pretrained %s (final lr %.3g)", seed, m, est.final_lr_)
        out[m] = est
    return out


def _scores_for(cfg, seed, run_dir, ds, tuples, pretrained=None, from_checkpoints=False) -> Dict[str, np.ndarray]:
    """Probability matrices on the test tuples for every requested curve."""
    d = cfg.dataset
    Xtr, ytr = tuples["train"].gather(ds), tuples["train"].labels
    Xte = tuples["test"].gather(ds)
    scores: Dict[str, np.ndarray] = {}
    uni: Dict[str, np.ndarray] = {}
    for k, m in enumerate(d.modalities):
        if from_checkpoints:
            net = ModalityNetwork(cfg.networks[m], d.subjects, dtype=cfg.dtype)
            net.load_state_dict(load_checkpoint(os.path.join(run_dir, f"unimodal_{m}.ckpt")))
            uni[m] = predict_proba(net, Xte[m])
        else:
            uni[m] = pretrained[m].predict_proba(Xte[m])
    if "unimodal" in cfg.kinds:
        for m in d.modalities:
            scores[f"unimodal_{m}"] = uni[m]
    stack = np.stack([uni[m] for m in d.modalities])
    if "score_sum" in cfg.kinds:
        scores["score_sum"] = stack.sum(axis=0) / len(stack)
    if "score_major" in cfg.kinds:
        votes = np.zeros_like(stack[0])
        for s in stack:
            votes[np.arange(len(s)), s.argmax(axis=1)] += 1
        ranked = votes + stack.sum(axis=0) / (len(stack) + 1)
        scores["score_major"] = ranked / ranked.sum(axis=1, keepdims=True)
    for kind in cfg.fusion_kinds:
        ckpt = os.path.join(run_dir, f"fusion_{kind}.ckpt")
        if from_checkpoints:
            net = _fusion_skeleton(cfg, kind)
            state = load_checkpoint(ckpt)
            for p in net.params():
                p.value[...] = state[p.name]
            for m in net.modalities:
                for name, buf in net.backbones[m].buffers().items():
                    buf[...] = state[name]
            scores[kind] = predict_proba(net, Xte)
            continue
        phases = {ph: replace(tc, seed=seed) for ph, tc in cfg.train.items()}
        est = FusionNetClassifier(kind, d.modalities, cfg.networks, cfg.groups, cfg.fusion_dim,
                                  phases["pretrain_modality"], phases["frozen_fusion"], phases["joint"],
                                  pretrained, cfg.dtype, random_state=seed)
        est.fit(Xtr, ytr)
        est.log_.to_csv(os.path.join(run_dir, f"log_{kind}.csv"))
        with open(os.path.join(run_dir, f"trunk_{kind}.txt"), "w") as fh:
            fh.write("before_frozen = %s\nafter_frozen = %s\n" % est.frozen_checksums_)
        save_checkpoint(ckpt, est.net_.state_dict())
        log.info("seed %d: trained %s fusion", seed, kind)
        scores[kind] = est.predict_proba(Xte)
    return scores


def _fusion_skeleton(cfg: ExperimentConfig, kind: str) -> FusionNetwork:
    d = cfg.dataset
    backbones = {m: ModalityNetwork(cfg.networks[m], None, dtype=cfg.dtype) for m in d.modalities}
    dims = {(m, t): shp["embedding"][0] for m in d.modalities
            for t, shp in cfg.networks[m].tap_shapes().items()}
    head = FusionHead(kind, d.modalities, dims, d.subjects, cfg.fusion_dim, cfg.groups, dtype=cfg.dtype)
    return FusionNetwork(backbones, head)


def _evaluate(cfg, all_scores: Dict[int, Dict[str, np.ndarray]], labels: Dict[int, np.ndarray], out_dir):
    names = _curve_names(cfg)
    rows, curves, acc = [], {}, {n: [] for n in names}
    per_curve: Dict[str, List[CMCResult]] = {n: [] for n in names}
    for seed, scores in all_scores.items():
        for n in names:
            res = cmc_curve(scores[n], labels[seed], seeds=[seed])
            per_curve[n].append(res)
            rows.append((f"seed{seed}", n, res))
            acc[n].append(rank_one_accuracy(scores[n], labels[seed]))
    for n in names:
        curves[n] = aggregate_runs(per_curve[n])
        rows.append(("mean", n, curves[n]))
    write_metrics_csv(os.path.join(out_dir, cfg.metrics_csv), rows)
    emit_cmc_plot(curves, os.path.join(out_dir, cfg.cmc_svg), title=f"CMC ({cfg.name})")
    summary = {n: (float(np.mean(v)) * 100, float(np.std(v)) * 100) for n, v in acc.items()}
    with open(os.path.join(out_dir, cfg.summary), "w") as fh:
        fh.write(f"# rank-one accuracy (%) over seeds {list(all_scores)}; std is the population std\n")
        fh.write(f"{'model':<28}{'mean':>8}{'std':>8}  " + "  ".join(f"{'R@' + str(k):>6}" for k in cfg.ks) + "\n")
        for n in names:
            mean, std = summary[n]
            rk = "  ".join(f"{curves[n].at(k) * 100:6.2f}" for k in cfg.ks)
            fh.write(f"{n:<28}{mean:8.2f}{std:8.2f}  {rk}\n")
    return summary, curves


def run_experiment(config_path: str, out_dir: str, seed_override: Optional[List[int]] = None) -> dict:
    """Run every seed of the experiment; returns ``{model: (mean %, std %)}``.

    On failure the partial artifacts stay in place next to a ``FAILED`` marker
    and the exception propagates.
    """
    cfg = load_config(config_path, seed_override)
    os.makedirs(out_dir, exist_ok=True)
    for stale in ("FAILED", "DONE"):
        if os.path.exists(os.path.join(out_dir, stale)):
            os.remove(os.path.join(out_dir, stale))
    shutil.copyfile(config_path, os.path.join(out_dir, "config.ini"))
    try:
        all_scores, labels = {}, {}
        for seed in cfg.seeds:
            run_dir = os.path.join(out_dir, f"seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            ds, tuples = build_data(cfg, seed)
            with open(os.path.join(run_dir, "manifest.txt"), "w") as fh:
                fh.write(_manifest(ds))
            if cfg.snapshot:
                save_snapshot(ds, os.path.join(run_dir, "dataset"))
            pretrained = _pretrain(cfg, ds, seed, run_dir)
            all_scores[seed] = _scores_for(cfg, seed, run_dir, ds, tuples, pretrained)
            labels[seed] = tuples["test"].labels
        summary, _ = _evaluate(cfg, all_scores, labels, out_dir)
    except Exception:
        with open(os.path.join(out_dir, "FAILED"), "w") as fh:
            fh.write(traceback.format_exc())
        raise
    with open(os.path.join(out_dir, "DONE"), "w") as fh:
        fh.write("ok\n")
    return summary


def evaluate_checkpoints(config_path: str, out_dir: str, seed_override=None) -> dict:
    """Recompute metrics from the checkpoints of a finished run."""
    cfg = load_config(config_path, seed_override)
    all_scores, labels = {}, {}
    for seed in cfg.seeds:
        run_dir = os.path.join(out_dir, f"seed{seed}")
        ds, tuples = build_data(cfg, seed)
        all_scores[seed] = _scores_for(cfg, seed, run_dir, ds, tuples, from_checkpoints=True)
        labels[seed] = tuples["test"].labels
    summary, _ = _evaluate(cfg, all_scores, labels, out_dir)
    return summary


def plot_from_csv(csv_path: str, svg_path: str, run_id: str = "mean") -> None:
    table = read_metrics_csv(csv_path)
    if run_id not in table:
        raise KeyError(f"run {run_id!r} not in {csv_path}; available: {sorted(table)}")
    curves = {}
    for name, by_k in table[run_id].items():
        ks = sorted(by_k)
        if ks != list(range(1, len(ks) + 1)):
            raise ValueError(f"{csv_path}: curve {name} lacks some ranks; cannot redraw the CMC")
        curves[name] = CMCResult(np.array([by_k[k][0] for k in ks]), 0, len(ks))
    emit_cmc_plot(curves, svg_path, title=f"CMC ({run_id})")
