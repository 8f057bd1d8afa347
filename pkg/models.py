from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple
from enum import Enum
import math

from tensor import Activation


# ============================================
# ARCHITECTURE MODELS
# ============================================

class LayerKind(str, Enum):
    """Layer kinds the network can stack"""
    CONV2D = "conv2d"
    DENSE = "dense"
    POOL = "pool"
    FLATTEN = "flatten"


class LayerSpec(BaseModel):
    """One layer W_l; input extents are derived from the previous layer"""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    out_features: Optional[int] = Field(None, gt=0, description="n_l for dense, c_out for conv2d")
    kernel_size: int = Field(3, gt=0)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    pool_size: int = Field(2, ge=1)
    activation: Activation = "identity"

    @model_validator(mode="after")
    def weighted_layers_need_width(self):
        if self.kind in (LayerKind.CONV2D, LayerKind.DENSE) and self.out_features is None:
            raise ValueError(f"{self.kind.value} layer needs out_features")
        return self

    @property
    def has_weights(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.DENSE)

    def weight_shape(self, in_shape: Tuple[int, ...]) -> Optional[Tuple[int, ...]]:
        if self.kind == LayerKind.DENSE:
            return (self.out_features, in_shape[0])
        if self.kind == LayerKind.CONV2D:
            return (self.out_features, in_shape[0], self.kernel_size, self.kernel_size)
        return None

    def output_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Propagate one example's extents through this layer (raises ValueError)."""
        if self.kind == LayerKind.DENSE:
            if len(in_shape) != 1:
                raise ValueError(f"dense layer expects a flat input, got {in_shape}")
            return (self.out_features,)
        if len(in_shape) != 3:
            raise ValueError(f"{self.kind.value} layer expects (c, h, w) input, got {in_shape}")
        c, h, w = in_shape
        if self.kind == LayerKind.FLATTEN:
            return (c * h * w,)
        if self.kind == LayerKind.POOL:
            if h % self.pool_size or w % self.pool_size:
                raise ValueError(f"pool window {self.pool_size} does not tile {h}x{w}")
            return (c, h // self.pool_size, w // self.pool_size)
        k, s, p = self.kernel_size, self.stride, self.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise ValueError(f"kernel {k} larger than padded input {h}x{w} (padding {p})")
        return (self.out_features, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def token(self) -> str:
        """Compact manifest form, e.g. ``conv2d:8:k3:s2:p1:gelu``."""
        if self.kind == LayerKind.CONV2D:
            return f"conv2d:{self.out_features}:k{self.kernel_size}:s{self.stride}:p{self.padding}:{self.activation}"
        if self.kind == LayerKind.DENSE:
            return f"dense:{self.out_features}:{self.activation}"
        if self.kind == LayerKind.POOL:
            return f"pool:{self.pool_size}"
        return "flatten"

    @classmethod
    def parse(cls, token: str) -> "LayerSpec":
        parts = [p.strip() for p in token.strip().split(":")]
        kind = parts[0]
        try:
            if kind == "conv2d":
                fields = {"kind": kind, "out_features": int(parts[1])}
                for part in parts[2:]:
                    if part[0] in "ksp" and part[1:].isdigit():
                        fields[{"k": "kernel_size", "s": "stride", "p": "padding"}[part[0]]] = int(part[1:])
                    else:
                        fields["activation"] = part
                return cls(**fields)
            if kind == "dense":
                return cls(kind=kind, out_features=int(parts[1]), activation=parts[2] if len(parts) > 2 else "identity")
            if kind == "pool":
                return cls(kind=kind, pool_size=int(parts[1]))
            if kind == "flatten" and len(parts) == 1:
                return cls(kind=kind)
        except (IndexError, ValueError) as e:
            raise ValueError(f"invalid layer token {token!r}: {e}") from None
        raise ValueError(f"invalid layer token {token!r}")


class Architecture(BaseModel):
    """Ordered layer stack f = f_L ∘ … ∘ f_1 plus an output head"""
    model_config = ConfigDict(frozen=True)

    input_shape: Tuple[int, ...] = Field(..., min_length=1, max_length=3)
    class_count: int = Field(..., gt=0)
    layers: Tuple[LayerSpec, ...] = Field(..., min_length=1)
    head: Literal["softmax", "identity"] = "softmax"

    @model_validator(mode="after")
    def shapes_conform(self):
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers, start=1):
            try:
                shape = layer.output_shape(shape)
            except ValueError as e:
                raise ValueError(f"layer {i} ({layer.token()}): {e}") from None
        if shape != (self.class_count,):
            raise ValueError(f"final layer emits {shape}, expected ({self.class_count},)")
        return self

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_shapes(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """(input extents, output extents) per layer, 0-based list."""
        shapes, shape = [], tuple(self.input_shape)
        for layer in self.layers:
            out = layer.output_shape(shape)
            shapes.append((shape, out))
            shape = out
        return shapes

    def weighted_layers(self) -> List[int]:
        """1-based indices of layers that hold weights."""
        return [i for i, layer in enumerate(self.layers, start=1) if layer.has_weights]

    def weight_shape(self, layer: int) -> Optional[Tuple[int, ...]]:
        in_shape, _ = self.layer_shapes()[layer - 1]
        return self.layers[layer - 1].weight_shape(in_shape)

    @classmethod
    def reference(cls, class_count: int = 5, image_size: int = 32) -> "Architecture":
        """Four gelu convs (8→16→16→32) + global average pool + dense head."""
        tokens = [
            "conv2d:8:k3:s2:p1:gelu",
            "conv2d:16:k3:s2:p1:gelu",
            "conv2d:16:k3:s1:p1:gelu",
            "conv2d:32:k3:s2:p1:gelu",
            f"pool:{image_size // 8}",
            "flatten",
            f"dense:{class_count}:identity",
        ]
        return cls(
            input_shape=(1, image_size, image_size),
            class_count=class_count,
            layers=tuple(LayerSpec.parse(t) for t in tokens),
        )


# ============================================
# EDIT MODELS
# ============================================

class EditMethod(str, Enum):
    """Model update methods"""
    LOW_RANK = "low_rank"
    SURGICAL = "surgical"
    FULL = "full"


class EditPlan(BaseModel):
    """One edit run: method, target layer, rank, learning rate, step count, seed"""
    model_config = ConfigDict(frozen=True)

    method: EditMethod
    layer: Optional[int] = Field(None, ge=1, description="Target layer (ignored for full)")
    rank: int = Field(2, ge=1, description="Adapter rank (low_rank only)")
    lr: float = Field(..., gt=0)
    steps: int = Field(200, ge=0, description="Number of SGD steps")
    seed: int = 0
    batch_size: Optional[int] = Field(None, ge=1, description="Minibatch size (None = full batch)")

    @field_validator('lr')
    @classmethod
    def lr_must_be_finite(cls, v):
        if not math.isfinite(v):
            raise ValueError('lr must be finite')
        return v

    @model_validator(mode="after")
    def single_layer_methods_need_layer(self):
        if self.method != EditMethod.FULL and self.layer is None:
            raise ValueError(f"{self.method.value} edits need a target layer")
        return self

    def label(self) -> str:
        layer = "all" if self.method == EditMethod.FULL else str(self.layer)
        return f"{self.method.value}/layer={layer}/lr={self.lr!r}/seed={self.seed}"


class EditOutcomeSummary(BaseModel):
    """Serializable view of an edit outcome (no parameter payloads)"""
    plan: EditPlan
    selection_accuracy: Optional[float] = None
    edit_test_accuracy: Optional[float] = None
    original_val_accuracy: float
    base_original_val_accuracy: float
    baseline_drop: float = Field(..., description="Percentage points lost on the original validation set")
    final_loss: float
    loss_trajectory: List[float]


# ============================================
# SHIFT MODELS
# ============================================

class ShiftKind(str, Enum):
    AGING = "aging"
    DETECTOR = "detector"


AGING_DURATIONS = (0, 14, 24, 36, 43, 54, 60)


class ShiftSpec(BaseModel):
    """Parametric description of a synthetic distribution shift"""
    kind: ShiftKind

    # aging
    duration: Optional[int] = Field(None, description="Aging duration D in days")
    magnitude: Optional[float] = Field(None, ge=0, le=1, description="Morphing magnitude g(D)")
    confounded: bool = False

    # detector
    brightness_offset: float = Field(0.0, ge=-0.5, le=0.5)
    contrast_gain: float = Field(1.0, gt=0, le=4.0)
    gamma: float = Field(1.0, ge=0.1, le=10.0)
    noise_sigma: float = Field(0.0, ge=0, le=0.5)
    blur_radius: float = Field(0.0, ge=0, le=5.0)
    seed: int = 0

    @field_validator('duration')
    @classmethod
    def duration_supported(cls, v):
        if v is not None and v not in AGING_DURATIONS:
            raise ValueError(f'duration must be one of {AGING_DURATIONS}')
        return v

    @property
    def is_identity_detector(self) -> bool:
        return (
            self.brightness_offset == 0.0 and self.contrast_gain == 1.0 and self.gamma == 1.0
            and self.noise_sigma == 0.0 and self.blur_radius == 0.0
        )

    @classmethod
    def default_detector(cls, seed: int = 0) -> "ShiftSpec":
        return cls(
            kind=ShiftKind.DETECTOR,
            brightness_offset=0.12,
            contrast_gain=0.55,
            gamma=1.6,
            noise_sigma=0.08,
            blur_radius=0.9,
            seed=seed,
        )


# ============================================
# SEARCH MODELS
# ============================================

def _geometric(lo: float, hi: float, n: int) -> List[float]:
    ratio = (hi / lo) ** (1.0 / (n - 1))
    return [float(lo * ratio ** i) for i in range(n - 1)] + [float(hi)]


class SearchConfig(BaseModel):
    """Gated coarse-to-fine search over layers and learning rates"""
    coarse_lrs: List[float] = Field(default_factory=lambda: _geometric(1e-4, 1e-1, 7))
    fine_factors: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    layers: Optional[List[int]] = Field(None, description="Candidate layers (None = all weighted layers)")
    tau: float = Field(1.5, gt=0, description="Max drop on the original validation set, percentage points")
    seeds: int = Field(5, ge=1, description="Seeds per configuration")
    seed: int = Field(0, description="First seed; seeds are seed, seed+1, ...")
    top_layers: int = Field(2, ge=1)
    steps: int = Field(200, ge=0)
    rank: int = Field(2, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    selection: Literal["shared", "holdout"] = "shared"

    @field_validator('coarse_lrs', 'fine_factors')
    @classmethod
    def grid_sorted_positive(cls, v):
        if not v:
            raise ValueError('grid must be nonempty')
        if any(not (x > 0 and math.isfinite(x)) for x in v):
            raise ValueError('grid values must be positive and finite')
        if list(v) != sorted(v):
            raise ValueError('grid must be sorted ascending')
        return v

    @field_validator('fine_factors')
    @classmethod
    def fine_grid_keeps_incumbent(cls, v):
        if 1.0 not in v:
            raise ValueError('fine_factors must include 1.0 (the coarse winner)')
        return v

    def seed_list(self) -> List[int]:
        return [self.seed + i for i in range(self.seeds)]

    def plan(self, method: EditMethod, layer: Optional[int], lr: float, seed: int) -> EditPlan:
        return EditPlan(
            method=method,
            layer=None if method == EditMethod.FULL else layer,
            rank=self.rank,
            lr=lr,
            steps=self.steps,
            seed=seed,
            batch_size=self.batch_size,
        )


# ============================================
# CHECKPOINT MODELS
# ============================================

class CheckpointMeta(BaseModel):
    """Training provenance stored next to the parameters"""
    seed: int
    dataset_id: str = Field(..., description="Id of the original validation set")
    base_val_accuracy: float = Field(..., ge=0, le=1)
    origin: Literal["init", "train_base", "edit"] = "train_base"
    steps: int = 0
    lr: Optional[float] = None
    train_accuracy: Optional[float] = None
    edit_plan: Optional[EditPlan] = None


# ============================================
# API MODELS
# ============================================

class TargetInfo(BaseModel):
    name: str
    edit_train_size: int
    edit_test_size: int


class EvaluateRequest(BaseModel):
    target: str = Field(..., min_length=1, description="e.g. 'aging:43' or 'detector'")


class EvaluationResponse(BaseModel):
    target: str
    heldout_size: int
    accuracy: float


class EditRequest(BaseModel):
    target: str = Field(..., min_length=1)
    plan: EditPlan


class EditResponse(BaseModel):
    target: str
    outcome: EditOutcomeSummary
    accepted: Dict[str, bool] = Field(..., description="Gate decision per threshold (percentage points)")


class LedgerPage(BaseModel):
    entries: List[dict]
    page: int
    page_size: int
    total: int
