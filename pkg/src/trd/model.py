"""Dual-branch model assembly and checkpoint I/O."""
from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .config import RunConfig, from_dict
from .crossmodal_amplifier import FusionWeights, InvertedBottleneckProjection, amplify
from .crossmodal_filter import BottleneckProjection, ModifiedOCBE
from .exceptions import CheckpointError, DimensionError
from .networks import BackboneProfile, StudentDecoder, TeacherEncoder, build_teacher, get_profile

BRANCHES = ("2d", "3d")
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class Branch(nn.Module):
    """Trainable parts of one modality branch; the other modality is "B"."""

    def __init__(self, profile: BackboneProfile, cf_enabled: bool = True, bottleneck_size: int = 8,
                 ca_enabled: bool = True, expansion: int = 2):
        super().__init__()
        self.bp = BottleneckProjection(profile, bottleneck_size) if cf_enabled else None
        self.ocbe = ModifiedOCBE(profile, fused=cf_enabled)
        self.decoder = StudentDecoder(profile)
        self.ibp = InvertedBottleneckProjection(profile, expansion) if ca_enabled else None
        self.fusion = FusionWeights() if ca_enabled else None

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint optimizer groups: student (decoder + OCBE), filter (BP), amplifier (IBP + w)."""
        groups = {"student": [*self.decoder.parameters(), *self.ocbe.parameters()]}
        if self.bp is not None:
            groups["filter"] = list(self.bp.parameters())
        if self.ibp is not None:
            groups["amplifier"] = [*self.ibp.parameters(), *self.fusion.parameters()]
        return groups


@dataclass
class BranchOutputs:
    F_E_own: list[Tensor]
    F_E_other: list[Tensor]
    F_BP: list[Tensor] | None
    F_D: list[Tensor]
    F_IBP: list[Tensor] | None
    F_CA: list[Tensor]
    embedding: Tensor = field(repr=False)

    def pyramids(self) -> dict[str, list[Tensor]]:
        out = {"F_E_own": self.F_E_own, "F_E_other": self.F_E_other, "F_D": self.F_D, "F_CA": self.F_CA}
        if self.F_BP is not None:
            out["F_BP"] = self.F_BP
        if self.F_IBP is not None:
            out["F_IBP"] = self.F_IBP
        return out


@dataclass
class TRDOutputs:
    branch_2d: BranchOutputs
    branch_3d: BranchOutputs

    def __getitem__(self, name: str) -> BranchOutputs:
        return {"2d": self.branch_2d, "3d": self.branch_3d}[name]


class TRDModel(nn.Module):
    """Shared frozen teacher plus one trainable :class:`Branch` per modality."""

    def __init__(self, profile: BackboneProfile, cf_enabled: bool = True, bottleneck_size: int = 8,
                 ca_enabled: bool = True, expansion: int = 2, seed: int = 0,
                 teacher: TeacherEncoder | None = None):
        super().__init__()
        self.profile = profile
        self.cf_enabled = cf_enabled
        self.ca_enabled = ca_enabled
        self.teacher = teacher if teacher is not None else build_teacher(profile)
        branches = {}
        for name in BRANCHES:
            # same seed per branch: symmetric initialization
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                branches[name] = Branch(profile, cf_enabled, bottleneck_size, ca_enabled, expansion)
        self.branches = nn.ModuleDict(branches)
        self.calibration = None
        self.config: RunConfig | None = None

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for b in self.branches.values() for p in b.parameters()]

    def _branch(self, branch: Branch, own: list[Tensor], other: list[Tensor],
                detach_projection: bool, block_decoder_in_ca: bool) -> BranchOutputs:
        f_bp = branch.bp(other) if branch.bp is not None else None
        if f_bp is not None:
            proj = [f.detach() for f in f_bp] if detach_projection else f_bp
            emb = branch.ocbe(own, proj)
        else:
            emb = branch.ocbe(own)
        f_d = branch.decoder(emb)
        if branch.ibp is not None:
            f_ibp = branch.ibp(other)
            d_in = [f.detach() for f in f_d] if block_decoder_in_ca else f_d
            f_ca = amplify(d_in, f_ibp, branch.fusion)
        else:
            f_ibp, f_ca = None, f_d
        return BranchOutputs(own, other, f_bp, f_d, f_ibp, f_ca, emb)

    def forward(self, x2d: Tensor, x3d: Tensor, detach_projection: bool = False,
                block_decoder_in_ca: bool = False) -> TRDOutputs:
        """Run both branches on a batch of paired ``(N, 3, H, W)`` images.

        ``detach_projection`` stops the decoder loss from reaching the bottleneck
        projection; ``block_decoder_in_ca`` stops the amplifier loss from
        reaching the decoder. Both only matter for training.
        """
        if x2d is None or x3d is None:
            raise DimensionError("both modality images are required")
        if x2d.shape != x3d.shape:
            raise DimensionError(f"modality shapes differ: {tuple(x2d.shape)} vs {tuple(x3d.shape)}")
        e2d = self.teacher(x2d)
        e3d = self.teacher(x3d)
        return TRDOutputs(
            self._branch(self.branches["2d"], e2d, e3d, detach_projection, block_decoder_in_ca),
            self._branch(self.branches["3d"], e3d, e2d, detach_projection, block_decoder_in_ca),
        )


def build_model(cfg: RunConfig) -> TRDModel:
    profile = get_profile(cfg.backbone.profile, cfg.backbone.seed, cfg.backbone.weights_path)
    model = TRDModel(profile, cfg.cf.enabled, cfg.bottleneck_size, cfg.ca.enabled, cfg.ca.expansion,
                     seed=cfg.trainer.seed)
    model.config = cfg
    return model


def forward(model: TRDModel, sample) -> TRDOutputs:
    """Run the model on one :class:`~trd.datasets.MultimodalSample` (or an image pair)."""
    if isinstance(sample, tuple):
        x2d, x3d = sample
    else:
        x2d, x3d = getattr(sample, "image_2d", None), getattr(sample, "image_3d", None)
    if x2d is None or x3d is None:
        raise DimensionError("sample is missing a modality image")
    x2d, x3d = torch.as_tensor(x2d), torch.as_tensor(x3d)
    if x2d.dim() == 3:
        x2d, x3d = x2d.unsqueeze(0), x3d.unsqueeze(0)
    return model(x2d, x3d)


# --- checkpoint -----------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _le(t: Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path: str | os.PathLike, model: TRDModel, extra: dict | None = None,
                    optimizer_states: dict[str, dict] | None = None) -> None:
    """Write a deterministic zip: ``manifest.json`` plus one ``.npy`` per array.

    Arrays are keyed by module path (``model/<state_dict key>``). Calibration
    stats, when present, go under ``calibration/``; optimizer moments under
    ``optim/``. Entries carry a fixed timestamp so identical models hash equal.
    """
    if model.config is None:
        raise CheckpointError("model has no config attached; build it with build_model()")
    arrays: dict[str, np.ndarray] = {}
    for key, t in model.state_dict().items():
        if key.startswith("teacher."):
            continue
        arrays[f"model/{key}"] = _le(t)
    calib = None
    if model.calibration is not None:
        calib = model.calibration.to_dict()
    opt_meta = {}
    for name, state in (optimizer_states or {}).items():
        opt_meta[name] = {}
        for idx, pstate in state["state"].items():
            for k, v in pstate.items():
                arrays[f"optim/{name}/{idx}/{k}"] = _le(torch.as_tensor(v))
        opt_meta[name]["param_groups"] = state["param_groups"]
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "profile": model.profile.name,
        "model_fingerprint": model.config.model_fingerprint(),
        "config": model.config.to_dict(),
        "modules": sorted({k.split(".")[1] + "." + k.split(".")[2] for k in model.state_dict() if k.startswith("branches.")}),
        "calibration": calib,
        "optimizers": opt_meta,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1), compress_type=zipfile.ZIP_DEFLATED)
        for key in sorted(arrays):
            info = zipfile.ZipInfo(key + ".npy", date_time=_ZIP_DATE)
            zf.writestr(info, _npy_bytes(arrays[key]), compress_type=zipfile.ZIP_DEFLATED)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(manifest, arrays)`` without building a model."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    return manifest, arrays


def load_checkpoint(path: str | os.PathLike, profile: str | None = None,
                    cfg: RunConfig | None = None) -> tuple[TRDModel, dict]:
    """Rebuild the model stored at ``path``.

    ``profile`` or ``cfg`` (when given) must agree with the checkpoint; a
    mismatch raises CheckpointError. Returns ``(model, manifest)``; optimizer
    arrays are in ``manifest["optimizer_arrays"]``.
    """
    manifest, arrays = read_checkpoint(path)
    if profile is not None and profile != manifest["profile"]:
        raise CheckpointError(f"checkpoint profile is {manifest['profile']!r}, requested {profile!r}")
    stored = from_dict(manifest["config"])
    if cfg is not None:
        if cfg.backbone.profile != manifest["profile"]:
            raise CheckpointError(f"checkpoint profile is {manifest['profile']!r}, config asks for {cfg.backbone.profile!r}")
        if cfg.model_fingerprint() != manifest["model_fingerprint"]:
            raise CheckpointError("checkpoint model configuration (backbone/cf/ca) differs from the requested one")
        stored = cfg
    model = build_model(stored)
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.startswith("teacher.")]
    if missing or unexpected:
        raise CheckpointError(f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
    if manifest.get("calibration"):
        from .scoring import CalibrationStats
        model.calibration = CalibrationStats.from_dict(manifest["calibration"])
    optim = {}
    for k, v in arrays.items():
        if k.startswith("optim/"):
            _, name, idx, field_name = k.split("/")
            optim.setdefault(name, {}).setdefault(int(idx), {})[field_name] = torch.from_numpy(v.copy())
    manifest["optimizer_arrays"] = optim
    return model, manifest
