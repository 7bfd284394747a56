"""Training loop with per-part optimizers, and the evaluation driver."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datasets import MultimodalSample, check_split
from .exceptions import EvaluationError, TrainingError
from .metrics import MetricsReport, evaluate_all
from .model import BRANCHES, TRDModel, build_model, load_checkpoint, save_checkpoint
from .objectives import BranchLosses, LossBreakdown, loss_CA, loss_CF, loss_D
from .scoring import calibrate, fuse, image_score, predict_branch_maps


@dataclass
class TrainLog:
    seed: int
    config_fingerprint: str
    epochs: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e["losses"]["L_TRD"] for e in self.epochs]

    def comparable(self) -> dict:
        """Everything except wall-clock times."""
        return {"seed": self.seed, "config_fingerprint": self.config_fingerprint,
                "epochs": [{k: v for k, v in e.items() if k != "wall_time"} for e in self.epochs]}

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "config_fingerprint": self.config_fingerprint,
                           "epochs": self.epochs}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> TrainLog:
        d = json.loads(text)
        return cls(d["seed"], d["config_fingerprint"], d["epochs"])


def log_path_for(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.stem + ".trainlog.json")


def set_reproducible(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def make_optimizers(model: TRDModel, lr: float) -> dict[str, torch.optim.Adam]:
    """One Adam per (branch, part): ``2d.student``, ``2d.filter``, ``2d.amplifier``, ..."""
    opts = {}
    for name in BRANCHES:
        for part, params in model.branches[name].parameter_groups().items():
            opts[f"{name}.{part}"] = torch.optim.Adam(params, lr=lr)
    return opts


def branch_losses(out) -> tuple[torch.Tensor, LossBreakdown]:
    """Total differentiable loss and its per-branch breakdown."""
    total = 0.0
    parts = {}
    for name in BRANCHES:
        b = out[name]
        bl = BranchLosses()
        ld = loss_D(b.F_E_own, b.F_D)
        total = total + ld
        bl.L_D = ld.item()
        if b.F_BP is not None:
            lcf = loss_CF(b.F_E_own, b.F_BP)
            total = total + lcf
            bl.L_CF = lcf.item()
        if b.F_IBP is not None:
            l_ibp, l_out, l_ca = loss_CA(b.F_E_own, b.F_IBP, b.F_CA)
            total = total + l_ca
            bl.L_IBP, bl.L_output = l_ibp.item(), l_out.item()
        parts[name] = bl
    return total, LossBreakdown(parts["2d"], parts["3d"])


def train_step(model: TRDModel, optimizers: dict, x2d: torch.Tensor, x3d: torch.Tensor,
               block_output_to_decoder: bool = True) -> LossBreakdown:
    out = model(x2d, x3d, detach_projection=True, block_decoder_in_ca=block_output_to_decoder)
    total, breakdown = branch_losses(out)
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss {float(total)}; breakdown {breakdown.to_dict()}")
    for opt in optimizers.values():
        opt.zero_grad(set_to_none=True)
    total.backward()
    for opt in optimizers.values():
        opt.step()
    return breakdown


def _stack(samples: list[MultimodalSample]) -> tuple[torch.Tensor, torch.Tensor]:
    return (torch.from_numpy(np.stack([s.image_2d for s in samples])),
            torch.from_numpy(np.stack([s.image_3d for s in samples])))


def _mean_breakdown(items: list[tuple[int, LossBreakdown]]) -> dict:
    """Batch-size weighted epoch average."""
    n = sum(k for k, _ in items)
    keys = ("L_D", "L_CF", "L_IBP", "L_output")

    def avg(attr):
        return BranchLosses(**{key: sum(k * getattr(getattr(b, attr), key) for k, b in items) / n for key in keys})

    return LossBreakdown(avg("branch_2d"), avg("branch_3d")).to_dict()


@dataclass
class TrainResult:
    model: TRDModel
    log: TrainLog
    checkpoint_path: Path | None = None


def train(cfg: RunConfig, train_data: list[MultimodalSample], val_data: list[MultimodalSample],
          checkpoint_path=None, resume_from=None, progress=None) -> TrainResult:
    """Train a model per ``cfg`` on normal samples, then calibrate on ``val_data``.

    ``progress`` is called with one line of text per epoch. With
    ``checkpoint_path`` the checkpoint and its TrainLog are written there.
    """
    check_split(train_data, "train")
    check_split(val_data, "validation")
    t = cfg.trainer
    set_reproducible(t.seed, t.deterministic)
    start_epoch = 0
    log = TrainLog(t.seed, cfg.fingerprint())
    if resume_from is not None:
        model, manifest = load_checkpoint(resume_from, cfg=cfg)
        model.config = cfg
        start_epoch = int(manifest["extra"].get("epoch", 0))
        logp = log_path_for(resume_from)
        if logp.is_file():
            log = TrainLog.from_json(logp.read_text())
    else:
        model = build_model(cfg)
    optimizers = make_optimizers(model, t.learning_rate)
    if resume_from is not None:
        for name, opt in optimizers.items():
            saved = manifest["optimizers"].get(name)
            if saved is not None:
                opt.load_state_dict({"state": manifest["optimizer_arrays"].get(name, {}),
                                     "param_groups": saved["param_groups"]})

    x2d, x3d = _stack(train_data)
    n = x2d.shape[0]
    model.train()
    gen = torch.Generator()
    for epoch in range(start_epoch, t.epochs):
        tic = time.perf_counter()
        gen.manual_seed(t.seed * 100003 + epoch)
        perm = torch.randperm(n, generator=gen)
        items = []
        for i in range(0, n, t.batch_size):
            idx = perm[i:i + t.batch_size]
            if idx.numel() < 2:
                # batch norm needs more than one sample per batch
                continue
            items.append((idx.numel(), train_step(model, optimizers, x2d[idx], x3d[idx], t.block_output_to_decoder)))
        losses = _mean_breakdown(items)
        if not math.isfinite(losses["L_TRD"]):
            raise TrainingError(f"epoch {epoch + 1}: non-finite mean loss")
        log.epochs.append({"epoch": epoch + 1, "losses": losses, "wall_time": time.perf_counter() - tic})
        if progress is not None:
            progress(f"epoch {epoch + 1}/{t.epochs} L_TRD={losses['L_TRD']:.4f} "
                     f"(2d {losses['2d']['L_D']:.3f}/{losses['2d']['L_CF']:.3f}/{losses['2d']['L_CA']:.3f}, "
                     f"3d {losses['3d']['L_D']:.3f}/{losses['3d']['L_CF']:.3f}/{losses['3d']['L_CA']:.3f})")

    model.calibration = calibrate(model, val_data, cfg.pixel_sigma)
    model.eval()
    if checkpoint_path is not None:
        checkpoint_path = Path(checkpoint_path)
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_path, model, extra={"epoch": t.epochs},
                        optimizer_states={k: o.state_dict() for k, o in optimizers.items()})
        log_path_for(checkpoint_path).write_text(log.to_json())
    return TrainResult(model, log, checkpoint_path)


@dataclass
class Evaluation:
    report: MetricsReport
    maps_2d: np.ndarray
    maps_3d: np.ndarray
    fused: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    masks: np.ndarray


def evaluate(model: TRDModel, test_data: list[MultimodalSample], cfg: RunConfig | None = None,
             fusion: str | None = None) -> Evaluation:
    """Score ``test_data`` and compute the metrics report."""
    cfg = cfg or model.config
    fusion = fusion or cfg.score.fusion
    if fusion == "norm_sum" and model.calibration is None:
        raise EvaluationError("checkpoint has no calibration stats; run training (which calibrates) "
                              "or calibrate() on validation normals first")
    m2d, m3d = predict_branch_maps(model, test_data, cfg.pixel_sigma)
    fused = fuse(m2d, m3d, model.calibration, fusion)
    scores = image_score(fused)
    labels = np.array([s.label for s in test_data])
    masks = np.stack([s.mask_or_zeros() for s in test_data])
    meta = {"config_fingerprint": cfg.fingerprint(), "model_fingerprint": cfg.model_fingerprint(),
            "fusion": fusion, "cf_enabled": cfg.cf.enabled, "ca_enabled": cfg.ca.enabled,
            "n_test": len(test_data)}
    report = evaluate_all(scores, labels, fused, masks, category=cfg.data.category,
                          fpr_limit=cfg.metrics.pro_fpr_limit,
                          max_thresholds=cfg.metrics.pro_max_thresholds, meta=meta)
    return Evaluation(report, m2d, m3d, fused, scores, labels, masks)
