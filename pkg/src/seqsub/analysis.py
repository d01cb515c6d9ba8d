"""MACs estimation, frame-rate accounting, and CSV emission.

MACs are counted in inference mode under the multiply-accumulate
convention: bias additions, nonlinearities, and softmax are free.
MACs-C is the total excluding front-end layers, which otherwise dominate
and obscure the effect of sequence-length reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

LAYER_KINDS = ("conv1d", "linear", "self_attention")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    is_frontend: bool = False
    # conv1d
    c_in: int | None = None
    c_out: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: str = "valid"  # "same" requires stride 1
    # linear
    d_in: int | None = None
    d_out: int | None = None
    # self_attention
    d_model: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d":
            dims = (self.c_in, self.c_out, self.kernel)
            if any(d is None or d < 1 for d in dims) or self.stride < 1:
                raise ValueError("conv1d needs positive c_in, c_out, kernel, stride")
            if self.padding not in ("valid", "same"):
                raise ValueError(f"unknown padding {self.padding!r}")
            if self.padding == "same" and self.stride != 1:
                raise ValueError("same padding is defined for stride 1 only")
        elif self.kind == "linear":
            if any(d is None or d < 1 for d in (self.d_in, self.d_out)):
                raise ValueError("linear needs positive d_in, d_out")
        else:
            if self.d_model is None or self.d_model < 1:
                raise ValueError("self_attention needs positive d_model")

    @classmethod
    def from_dict(cls, doc: dict) -> "LayerSpec":
        allowed = {
            "kind", "is_frontend", "c_in", "c_out", "kernel", "stride",
            "padding", "d_in", "d_out", "d_model",
        }
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown layer fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class MacsReport:
    per_layer: tuple[int, ...]
    total: int
    total_excluding_frontend: int
    seq_len: int

    @property
    def macs_c(self) -> int:
        return self.total_excluding_frontend


def _layer_macs(layer: LayerSpec, length: int) -> tuple[int, int]:
    """(MACs, output length) for one layer at the given input length."""
    if layer.kind == "conv1d":
        if layer.padding == "same":
            out_len = length
        else:
            out_len = (length - layer.kernel) // layer.stride + 1
        if out_len < 1:
            raise ValueError(
                f"sequence of length {length} vanishes in conv1d "
                f"(kernel {layer.kernel}, stride {layer.stride})"
            )
        return out_len * layer.c_out * layer.c_in * layer.kernel, out_len
    if layer.kind == "linear":
        return length * layer.d_in * layer.d_out, length
    d = layer.d_model
    return 4 * length * d * d + 2 * length * length * d, length


def macs_estimate(layers: list[LayerSpec], seq_len: int,
                  subsample_factor: int = 1,
                  subsample_after: int | None = None) -> MacsReport:
    """Per-layer and total multiply-accumulate counts at a given length.

    ``subsample_factor`` divides the propagated length (average-pooling
    semantics, ceil) after layer index ``subsample_after``; the default
    places the subsampler right after the leading front-end block.
    """
    if seq_len < 1:
        raise ValueError("sequence length must be >= 1")
    if subsample_factor < 1:
        raise ValueError("subsample factor must be >= 1")
    if subsample_after is None:
        subsample_after = 0
        for layer in layers:
            if not layer.is_frontend:
                break
            subsample_after += 1
    per_layer = []
    macs_c = 0
    length = seq_len
    for i, layer in enumerate(layers):
        if i == subsample_after and subsample_factor > 1:
            length = -(-length // subsample_factor)
        macs, length = _layer_macs(layer, length)
        per_layer.append(macs)
        if not layer.is_frontend:
            macs_c += macs
    total = sum(per_layer)
    return MacsReport(
        per_layer=tuple(per_layer),
        total=total,
        total_excluding_frontend=macs_c,
        seq_len=seq_len,
    )


def macs_vs_frame_rate(layers: list[LayerSpec], strides: list[int], seq_len: int,
                       subsample_after: int | None = None) -> list[dict]:
    """One row per stride: total MACs and MACs-C with the sequence shortened
    by that factor after the front end."""
    rows = []
    for stride in strides:
        report = macs_estimate(layers, seq_len, subsample_factor=stride,
                               subsample_after=subsample_after)
        rows.append({
            "stride": stride,
            "total_macs": report.total,
            "macs_c": report.total_excluding_frontend,
        })
    return rows


def unit_frame_rate(counts_and_durations) -> float:
    """Pooled units-per-second over a corpus: total units / total seconds."""
    pairs = list(counts_and_durations)
    if not pairs:
        raise ValueError("no (count, duration) pairs")
    total_units = 0.0
    total_seconds = 0.0
    for count, duration in pairs:
        if duration <= 0:
            raise ValueError("durations must be positive")
        total_units += count
        total_seconds += duration
    return total_units / total_seconds


# ---------------------------------------------------------------------------
# delimited output
# ---------------------------------------------------------------------------

def write_csv(path, header: list[str], rows: list[list]) -> None:
    """Comma-separated, header row, '.' decimal, LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def parse_model_doc(doc: dict) -> tuple[list[LayerSpec], int | None]:
    """Model description JSON: ordered layer list plus an optional explicit
    subsample position."""
    if "layers" not in doc or not doc["layers"]:
        raise ValueError("model description needs a nonempty 'layers' list")
    layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
    return layers, doc.get("subsample_after")
