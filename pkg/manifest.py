"""
Run manifest: INI-style ``[section]`` / ``key = value`` text.

Sections: run, architecture, data, detector, train, edit, search, report.
Lists are comma separated, duration→size maps are ``D:n`` pairs and layers
are compact tokens (``conv2d:8:k3:s2:p1:gelu, pool:4, flatten, dense:5:identity``).
Unknown sections or keys are usage errors.
"""

import configparser
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import UsageError
from models import (
    AGING_DURATIONS,
    Architecture,
    EditMethod,
    EditPlan,
    LayerSpec,
    SearchConfig,
    ShiftKind,
    ShiftSpec,
)

REFERENCE_AGING_SIZES = {0: 51, 14: 149, 24: 147, 36: 132, 43: 149, 54: 136, 60: 60}


def _split_list(v):
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def blank_means_default(cls, data):
        if isinstance(data, dict):
            return {k: v for k, v in data.items() if not (isinstance(v, str) and not v.strip())}
        return data


class RunSection(_Section):
    seed: int = 0
    out_dir: Optional[str] = None


class ArchitectureSection(_Section):
    class_count: int = Field(5, ge=2)
    image_size: int = Field(32, ge=8)
    layers: Optional[List[str]] = None
    head: Literal["softmax", "identity"] = "softmax"

    @field_validator("layers", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split_list(v)


class DataSection(_Section):
    base_size: int = Field(4827, ge=2)
    aging_sizes: Dict[int, int] = Field(default_factory=lambda: dict(REFERENCE_AGING_SIZES))
    aging_classes: List[int] = Field(default_factory=lambda: [1, 4])
    detector_size: int = Field(253, ge=0)
    confounded: List[int] = Field(default_factory=list)
    split_seed: Optional[int] = None

    @field_validator("aging_classes", "confounded", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split_list(v)

    @field_validator("aging_sizes", mode="before")
    @classmethod
    def parse_size_map(cls, v):
        if not isinstance(v, str):
            return v
        sizes = {}
        for pair in _split_list(v):
            duration, sep, size = pair.partition(":")
            if not sep:
                raise ValueError(f"expected D:n pairs, got {pair!r}")
            sizes[int(duration)] = int(size)
        return sizes

    @field_validator("aging_sizes")
    @classmethod
    def durations_supported(cls, v):
        bad = [D for D in v if D not in AGING_DURATIONS]
        if bad:
            raise ValueError(f"unsupported durations {bad}; expected a subset of {AGING_DURATIONS}")
        if any(n < 2 for n in v.values()):
            raise ValueError("every aging set needs at least 2 images")
        return dict(sorted(v.items()))


class DetectorSection(_Section):
    brightness_offset: float = 0.12
    contrast_gain: float = 0.55
    gamma: float = 1.6
    noise_sigma: float = 0.08
    blur_radius: float = 0.9
    seed: Optional[int] = None


class TrainSection(_Section):
    lr: float = Field(0.05, gt=0)
    steps: int = Field(4000, ge=0)
    batch_size: Optional[int] = Field(64, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)


class EditSection(_Section):
    method: EditMethod = EditMethod.LOW_RANK
    target: str = "aging:43"
    layer: Optional[int] = 4
    rank: int = 2
    lr: float = 0.01
    steps: int = 200
    seed: Optional[int] = None
    batch_size: Optional[int] = None


class SearchSection(_Section):
    method: EditMethod = EditMethod.LOW_RANK
    target: str = "aging:43"
    coarse_lrs: Optional[List[float]] = None
    fine_factors: Optional[List[float]] = None
    layers: Optional[List[int]] = None
    tau: float = 1.5
    seeds: int = 5
    top_layers: int = 2
    steps: int = 200
    rank: int = 2
    batch_size: Optional[int] = None
    selection: Literal["shared", "holdout"] = "shared"

    @field_validator("coarse_lrs", "fine_factors", "layers", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split_list(v)


class ReportSection(_Section):
    taus: List[float] = Field(default_factory=lambda: [1.5, 7.0])
    methods: List[EditMethod] = Field(default_factory=lambda: list(EditMethod))
    durations: Optional[List[int]] = None
    record_wall_time: bool = False

    @field_validator("taus", "methods", "durations", mode="before")
    @classmethod
    def split_lists(cls, v):
        return _split_list(v)


class RunManifest(BaseModel):
    """Everything an experiment depends on; re-running a manifest reproduces every output."""
    model_config = ConfigDict(extra="forbid")

    run: RunSection = Field(default_factory=RunSection)
    architecture: ArchitectureSection = Field(default_factory=ArchitectureSection)
    data: DataSection = Field(default_factory=DataSection)
    detector: DetectorSection = Field(default_factory=DetectorSection)
    train: TrainSection = Field(default_factory=TrainSection)
    edit: EditSection = Field(default_factory=EditSection)
    search: SearchSection = Field(default_factory=SearchSection)
    report: ReportSection = Field(default_factory=ReportSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def split_seed(self) -> int:
        return self.data.split_seed if self.data.split_seed is not None else self.run.seed

    def with_seed(self, seed: Optional[int]) -> "RunManifest":
        if seed is None:
            return self
        return self.model_copy(update={"run": self.run.model_copy(update={"seed": seed})})

    def build_architecture(self) -> Architecture:
        a = self.architecture
        if a.layers is None:
            arch = Architecture.reference(a.class_count, a.image_size)
            return arch if a.head == arch.head else arch.model_copy(update={"head": a.head})
        return Architecture(
            input_shape=(1, a.image_size, a.image_size),
            class_count=a.class_count,
            layers=tuple(LayerSpec.parse(t) for t in a.layers),
            head=a.head,
        )

    def detector_spec(self) -> ShiftSpec:
        d = self.detector
        return ShiftSpec(
            kind=ShiftKind.DETECTOR,
            brightness_offset=d.brightness_offset,
            contrast_gain=d.contrast_gain,
            gamma=d.gamma,
            noise_sigma=d.noise_sigma,
            blur_radius=d.blur_radius,
            seed=d.seed if d.seed is not None else self.run.seed,
        )

    def edit_plan(self) -> EditPlan:
        e = self.edit
        return EditPlan(
            method=e.method,
            layer=None if e.method == EditMethod.FULL else e.layer,
            rank=e.rank,
            lr=e.lr,
            steps=e.steps,
            seed=e.seed if e.seed is not None else self.run.seed,
            batch_size=e.batch_size,
        )

    def search_config(self, tau: Optional[float] = None) -> SearchConfig:
        s = self.search
        fields = {
            "layers": s.layers,
            "tau": s.tau if tau is None else tau,
            "seeds": s.seeds,
            "seed": self.run.seed,
            "top_layers": s.top_layers,
            "steps": s.steps,
            "rank": s.rank,
            "batch_size": s.batch_size,
            "selection": s.selection,
        }
        if s.coarse_lrs is not None:
            fields["coarse_lrs"] = s.coarse_lrs
        if s.fine_factors is not None:
            fields["fine_factors"] = s.fine_factors
        return SearchConfig(**fields)

    def report_durations(self) -> List[int]:
        durations = self.report.durations or list(self.data.aging_sizes)
        missing = [D for D in durations if D not in self.data.aging_sizes]
        if missing:
            raise UsageError(f"report.durations {missing} have no [data] aging_sizes entry")
        return sorted(durations)


def _validation_message(e: ValidationError) -> str:
    err = e.errors()[0]
    where = ".".join(str(p) for p in err["loc"])
    return f"{where}: {err['msg']}"


def parse_manifest(text: str, source: str = "<manifest>") -> RunManifest:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise UsageError(f"{source}: malformed manifest ({e.message.splitlines()[0]})") from None
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    unknown = [name for name in sections if name not in RunManifest.model_fields]
    if unknown:
        raise UsageError(f"{source}: unknown manifest sections {unknown}")
    try:
        manifest = RunManifest.model_validate(sections)
        manifest.build_architecture()
        manifest.edit_plan()
        manifest.search_config()
        manifest.detector_spec()
    except ValidationError as e:
        raise UsageError(f"{source}: {_validation_message(e)}") from None
    except ValueError as e:
        raise UsageError(f"{source}: {e}") from None
    return manifest


def load_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), source=str(path))
