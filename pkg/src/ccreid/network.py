"""Tri-stream model: shared residual backbone, part attention, per-stream
classifier heads, and the raw-stream inference embedding.

The raw image and the clothing-erased image pass through one and the same
backbone (weight sharing is structural, not a copy); the head-gated stream
multiplies the raw feature map by the head channel of the attention maps.
Each active stream has its own classifier head. At inference only the raw
stream runs and no parsing input is needed.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

CLASSIFIER_KINDS = ("conv_gap", "bnneck")


@dataclass
class BackboneConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    last_stage_stride: int = 1
    input_height: int = 128
    input_width: int = 64
    blocks_per_stage: int = 1

    def validate(self):
        if not self.stage_channels or any(c <= 0 for c in self.stage_channels):
            raise ConfigurationError("stage_channels must be positive integers")
        if self.last_stage_stride not in (1, 2):
            raise ConfigurationError("last_stage_stride must be 1 or 2")
        if self.blocks_per_stage <= 0:
            raise ConfigurationError("blocks_per_stage must be positive")
        h, w = self.feature_size()
        if h < 4 or w < 4:
            raise ConfigurationError(
                f"feature map {h}x{w} too small for input "
                f"{self.input_height}x{self.input_width}; need at least 4x4")
        return self

    @property
    def out_channels(self):
        return self.stage_channels[-1]

    def stage_strides(self):
        n = len(self.stage_channels)
        if n == 1:
            return [self.last_stage_stride]
        return [1] + [2] * (n - 2) + [self.last_stage_stride]

    def feature_size(self, height=None, width=None):
        """Spatial size of the backbone output for a given input size."""
        h = self.input_height if height is None else height
        w = self.input_width if width is None else width

        def down(x, stride):
            return (x + stride - 1) // stride  # 3x3 conv, padding 1

        h, w = down(h, 2), down(w, 2)                      # stem conv
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1          # 3x3/2 max pool, padding 1
        for s in self.stage_strides():
            h, w = down(h, s), down(w, s)
        return h, w


@dataclass
class ClassifierConfig:
    kind: str = "conv_gap"
    num_identities: int = 2

    def validate(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ConfigurationError(f"classifier kind must be one of {CLASSIFIER_KINDS}")
        if self.num_identities < 2:
            raise ConfigurationError("num_identities must be >= 2")
        return self


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or in_planes != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Width-configurable residual net with a configurable final stride."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_planes = c0
        for planes, stride in zip(cfg.stage_channels, cfg.stage_strides()):
            blocks = [BasicBlock(in_planes, planes, stride)]
            blocks += [BasicBlock(planes, planes) for _ in range(cfg.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_planes = planes
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        expected = (self.cfg.input_height, self.cfg.input_width)
        if tuple(x.shape[-2:]) != expected:
            raise ValidationError(f"backbone expects {expected} input, got {tuple(x.shape[-2:])}")
        return self.stages(self.stem(x))


class PartAttention(nn.Module):
    """Per-pixel softmax over body parts from a 1x1 map of the raw features."""

    def __init__(self, in_channels, num_parts=4):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_parts, 1)

    def forward(self, features):
        return torch.softmax(self.conv(features), dim=1)


def head_enhance(features, attention):
    """Gate a feature map by the head channel (part 0) of the attention maps."""
    if attention.shape[-2:] != features.shape[-2:]:
        raise ValidationError("attention and feature maps disagree in spatial size")
    return attention[:, 0:1] * features


class ConvGapClassifier(nn.Module):
    """Batch norm, 1x1 conv, global average pooling.

    The conv output doubles as the class activation map; the logits are its
    spatial mean, so both share one parameter set.
    """

    def __init__(self, in_channels, num_classes):
        super().__init__()
        self.bn = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, num_classes, 1)

    def forward(self, features):
        cam = self.conv(self.bn(features))
        return cam.mean(dim=(2, 3)), cam

    def embed(self, features):
        # Post-norm, pre-conv pooled feature: the retrieval embedding.
        return self.bn(features).mean(dim=(2, 3))


class BNNeckClassifier(nn.Module):
    """Pooling, batch norm, fully connected layer; no activation map."""

    def __init__(self, in_channels, num_classes):
        super().__init__()
        self.bn = nn.BatchNorm1d(in_channels)
        self.fc = nn.Linear(in_channels, num_classes, bias=False)

    def forward(self, features):
        return self.fc(self.bn(features.mean(dim=(2, 3)))), None

    def embed(self, features):
        return self.bn(features.mean(dim=(2, 3)))


def make_classifier(cfg: ClassifierConfig, in_channels):
    cfg.validate()
    if cfg.kind == "conv_gap":
        return ConvGapClassifier(in_channels, cfg.num_identities)
    return BNNeckClassifier(in_channels, cfg.num_identities)


@dataclass
class StreamOutputs:
    """Per-batch outputs of a training forward pass; disabled fields are None."""

    F_r: torch.Tensor | None = None
    F_h: torch.Tensor | None = None
    F_b: torch.Tensor | None = None
    M: torch.Tensor | None = None          # N x K attention maps
    f_r: torch.Tensor | None = None        # pooled pre-classifier features
    f_h: torch.Tensor | None = None
    f_b: torch.Tensor | None = None
    logits_r: torch.Tensor | None = None
    logits_h: torch.Tensor | None = None
    logits_b: torch.Tensor | None = None
    E_r: torch.Tensor | None = None        # N x I class activation maps
    E_h: torch.Tensor | None = None
    E_b: torch.Tensor | None = None


class TriStreamNet(nn.Module):
    """Shared-backbone tri-stream model with per-stream classifier heads.

    `streams` selects which of raw ("r"), head-gated ("h"), and
    clothing-erased ("b") streams are computed during training. The raw
    classifier head always exists because inference embeds through it.
    """

    def __init__(self, backbone_cfg: BackboneConfig, num_identities,
                 classifier_kind="conv_gap", streams=("r", "h", "b"), num_parts=4,
                 consistency_needed=True):
        super().__init__()
        if not streams or any(s not in ("r", "h", "b") for s in streams):
            raise ConfigurationError(f"streams must be a non-empty subset of ('r','h','b'), got {streams}")
        if classifier_kind == "bnneck" and consistency_needed:
            raise ConfigurationError(
                "the bnneck classifier produces no activation maps; disable the "
                "consistency loss or use the conv_gap classifier")
        self.streams = tuple(streams)
        self.num_parts = num_parts
        self.backbone = Backbone(backbone_cfg)
        c = backbone_cfg.out_channels
        self.attention = PartAttention(c, num_parts) if "h" in self.streams else None
        cls_cfg = ClassifierConfig(classifier_kind, num_identities)
        heads = {s: make_classifier(cls_cfg, c) for s in dict.fromkeys(self.streams + ("r",))}
        self.classifiers = nn.ModuleDict(heads)
        self.classifier_kind = classifier_kind
        self.num_identities = num_identities
        self._init_weights()

    def _init_weights(self):
        for m in self.backbone.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        heads = list(self.classifiers.modules())
        if self.attention is not None:
            heads += list(self.attention.modules())
        for m in heads:
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(m.weight, std=0.01)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def feature_size(self):
        return self.backbone.cfg.feature_size()

    def forward_train(self, raw, black=None):
        """Run every enabled stream on an augmented (raw, erased) batch.

        The backbone runs on the raw view first and the erased view second,
        so batch-norm statistics update in a fixed order.
        """
        out = StreamOutputs()
        if "r" in self.streams or "h" in self.streams:
            out.F_r = self.backbone(raw)
        if "h" in self.streams:
            out.M = self.attention(out.F_r)
            out.F_h = head_enhance(out.F_r, out.M)
        if "b" in self.streams:
            if black is None:
                raise ValidationError("the clothing-erased stream is enabled but no erased view was given")
            out.F_b = self.backbone(black)
        for s in self.streams:
            feats = getattr(out, f"F_{s}")
            setattr(out, f"f_{s}", feats.mean(dim=(2, 3)))
            logits, cam = self.classifiers[s](feats)
            setattr(out, f"logits_{s}", logits)
            setattr(out, f"E_{s}", cam)
        if "r" not in self.streams:
            out.F_r = None if "h" not in self.streams else out.F_r
        return out

    def infer_embedding(self, images):
        """Raw-stream retrieval embedding; requires eval mode.

        Returns the batch-normalized pooled raw feature, the vector right
        before the classifier. No parsing input is involved.
        """
        if self.training:
            raise RuntimeError("infer_embedding requires eval mode; call model.eval() first")
        with torch.no_grad():
            return self.classifiers["r"].embed(self.backbone(images))

    def config_dict(self):
        cfg = self.backbone.cfg
        return {
            "stage_channels": list(cfg.stage_channels),
            "last_stage_stride": cfg.last_stage_stride,
            "input_height": cfg.input_height,
            "input_width": cfg.input_width,
            "blocks_per_stage": cfg.blocks_per_stage,
            "num_identities": self.num_identities,
            "classifier_kind": self.classifier_kind,
            "streams": list(self.streams),
            "num_parts": self.num_parts,
        }


def build_model(cfg: dict) -> TriStreamNet:
    backbone_cfg = BackboneConfig(
        stage_channels=list(cfg["stage_channels"]),
        last_stage_stride=cfg["last_stage_stride"],
        input_height=cfg["input_height"],
        input_width=cfg["input_width"],
        blocks_per_stage=cfg.get("blocks_per_stage", 1),
    )
    kind = cfg.get("classifier_kind", "conv_gap")
    return TriStreamNet(
        backbone_cfg,
        num_identities=cfg["num_identities"],
        classifier_kind=kind,
        streams=tuple(cfg.get("streams", ("r", "h", "b"))),
        num_parts=cfg.get("num_parts", 4),
        consistency_needed=cfg.get("consistency_needed", kind == "conv_gap"),
    )


# ---------------------------------------------------------------------------
# Checkpoint container: an npz archive of little-endian arrays. Parameters
# and float buffers are stored as '<f4', integer buffers as '<i8', and the
# metadata record as UTF-8 JSON. FORMAT_VERSION guards the layout.
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def config_hash(cfg: dict):
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _to_array(tensor):
    arr = tensor.detach().cpu().numpy()
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    return arr.astype("<i8")


def save_checkpoint(path, model: TriStreamNet, optimizer=None, epoch=0, extra_meta=None):
    arrays = {}
    for name, tensor in model.state_dict().items():
        arrays[f"state/{name}"] = _to_array(tensor)
    if optimizer is not None:
        for pidx, pstate in optimizer.state_dict()["state"].items():
            for key, value in pstate.items():
                if torch.is_tensor(value):
                    arrays[f"opt/{pidx}/{key}"] = _to_array(value)
                else:
                    arrays[f"opt/{pidx}/{key}"] = np.asarray([value], dtype="<f4")
    arrays["rng/torch"] = torch.get_rng_state().numpy().astype("u1")
    cfg = model.config_dict()
    meta = {
        "format_version": FORMAT_VERSION,
        "model": cfg,
        "config_hash": config_hash(cfg),
        "epoch": int(epoch),
    }
    meta.update(extra_meta or {})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype="u1").copy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, meta, opt_arrays)."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {meta.get('format_version')}")
    model = build_model(meta["model"])
    state = {}
    reference = model.state_dict()
    for key, arr in arrays.items():
        if key.startswith("state/"):
            name = key[len("state/"):]
            if name not in reference:
                raise ValidationError(f"checkpoint parameter {name!r} does not match the model")
            state[name] = torch.from_numpy(arr.copy()).to(reference[name].dtype)
    missing = set(reference) - set(state)
    if missing:
        raise ValidationError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    opt_arrays = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    if "rng/torch" in arrays:
        meta["_torch_rng"] = arrays["rng/torch"]
    return model, meta, opt_arrays


def restore_optimizer(optimizer, opt_arrays):
    """Load serialized moment arrays back into a freshly built optimizer."""
    if not opt_arrays:
        return optimizer
    state = {}
    for key, arr in opt_arrays.items():
        pidx, name = key.split("/", 1)
        entry = state.setdefault(int(pidx), {})
        if name == "step":
            entry[name] = torch.tensor(float(arr.reshape(-1)[0]))
        else:
            entry[name] = torch.from_numpy(arr.copy()).float()
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)
    return optimizer
