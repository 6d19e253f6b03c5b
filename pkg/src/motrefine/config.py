"""Run configuration: loss coefficients, architecture knobs and the
ablation axes, with a plain ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

MOTION_FORMS = ("center+box", "center", "none")


@dataclass
class RefineConfig:
    # Hungarian-loss coefficients for the detection branch; the
    # association branch uses the box terms divided by assoc_divisor.
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0
    assoc_divisor: float = 5.0
    thr_out: float = 0.4
    thr_match: float = 0.5
    focal_cls: bool = True
    use_giou: bool = True

    # architecture
    num_queries: int = 30
    layers: int = 3
    dim: int = 64
    heads: int = 4
    beta: float = -10.0
    points: int = 4
    roi_size: int = 4
    encoder_width: int = 32
    image_size: int = 64

    # ablation axes
    dr_split: bool = True
    dr_embeddings: bool = True
    motion_form: str = "center+box"
    back_refer: bool = False

    # training / inference
    noise_scale: float = 1.0
    emit_threshold: float = 0.4
    assoc_iou_gate: float = 0.3
    # an unmatched track stays eligible for id inheritance for this many
    # extra frames before its id retires (bridges brief misses)
    max_coast: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.motion_form not in MOTION_FORMS:
            raise ValueError(
                f"motion_form must be one of {MOTION_FORMS}, got {self.motion_form!r}"
            )
        for name in ("thr_out", "thr_match", "emit_threshold", "assoc_iou_gate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def resolved_text(self) -> str:
        """All fields, defaults included, as key = value lines."""
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.resolved_text())

    @classmethod
    def from_file(cls, path) -> "RefineConfig":
        return cls(**parse_kv_file(path, cls))

    def replace(self, **kw) -> "RefineConfig":
        return dataclasses.replace(self, **kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if v == float("-inf"):
            return "-inf"
        return repr(v)
    return str(v)


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        if text.lower() in ("-inf", "-infinity"):
            return float("-inf")
        return float(text)
    return text


def parse_kv_file(path, cls=RefineConfig) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) against the
    fields of a dataclass; unknown keys raise with a line number."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    # from __future__ annotations stores types as strings
    resolved = {}
    for name, t in types.items():
        resolved[name] = {"float": float, "int": int, "bool": bool, "str": str}.get(
            t if isinstance(t, str) else t.__name__, str
        )
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, _, val = stripped.partition("=")
            key = key.strip()
            if key not in resolved:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _parse_value(val, resolved[key])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out
