"""Attention fusion and recurrent sequence decoding."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import glorot
from .errors import ConfigError, DataError
from .tensor import Tensor

EOS = "<eos>"
FUSE_EPS = 1e-6


class CharDictionary:
    """Ordered symbols with EOS appended last."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ConfigError("dictionary symbols must be unique")
        if EOS in symbols:
            raise ConfigError("EOS is appended automatically")
        if any(len(s) != 1 for s in symbols):
            raise ConfigError("dictionary symbols must be single characters")
        self.symbols = symbols + [EOS]
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def desk(cls) -> "CharDictionary":
        return cls(string.digits + "ACEH")

    @classmethod
    def full(cls) -> "CharDictionary":
        return cls(string.digits + string.ascii_uppercase + string.punctuation)

    @classmethod
    def named(cls, spec: str) -> "CharDictionary":
        """``desk``, ``full``, ``digits`` or a literal symbol string."""
        if spec == "desk":
            return cls.desk()
        if spec == "full":
            return cls.full()
        if spec == "digits":
            return cls(string.digits)
        return cls(spec)

    @property
    def eos_index(self) -> int:
        return len(self.symbols) - 1

    @property
    def size(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, CharDictionary) and other.symbols == self.symbols

    def index(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise DataError(f"character {ch!r} is not in the dictionary") from None

    def text(self, indices: Sequence[int]) -> str:
        """Symbols up to (not including) the first EOS."""
        out = []
        for i in indices:
            if int(i) == self.eos_index:
                break
            out.append(self.symbols[int(i)])
        return "".join(out)

    def to_string(self) -> str:
        return "".join(self.symbols[:-1])


def targets_from_transcript(transcript: str, dictionary: CharDictionary, L: int) -> list[int]:
    if len(transcript) > L:
        raise DataError(f"transcript {transcript!r} is longer than L={L}")
    idx = [dictionary.index(ch) for ch in transcript]
    return idx + [dictionary.eos_index] * (L - len(idx))


@dataclass
class DecoderConfig:
    hidden: int = 32
    layers: int = 2
    shortcut: bool = True
    normalize_attention: bool = True

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.layers < 1:
            raise ConfigError("decoder hidden size and layer count must be >= 1")


def attention_fuse(cma_logits: Tensor, x: Tensor, L: int, normalize: bool = True) -> Tensor:
    """Pool features under each character attention map: [N*L,H,W] x [C,H,W] -> [N,L,C]."""
    rows, h, w = cma_logits.shape
    c = x.shape[0]
    if x.shape[1:] != (h, w):
        raise T.ShapeError(f"attention {cma_logits.shape} and features {x.shape} differ spatially")
    if rows % L:
        raise T.ShapeError(f"{rows} attention rows is not a multiple of L={L}")
    a = T.sigmoid(T.reshape(cma_logits, (rows, h * w)))
    if normalize:
        total = T.tsum(a, axis=1, keepdims=True) + FUSE_EPS
        a = a / T.broadcast_to(total, (rows, h * w))
    fused = T.matmul(a, T.transpose(T.reshape(x, (c, h * w))))
    return T.reshape(fused, (rows // L, L, c))


def param_shapes(cfg: DecoderConfig, in_channels: int, classes: int) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(cfg.layers):
        d_in = in_channels if layer == 0 else 2 * d
        for direction in ("fwd", "bwd"):
            p = f"dec.l{layer}.{direction}"
            shapes[f"{p}.w_in"] = (d_in, 4 * d)
            shapes[f"{p}.w_rec"] = (d, 4 * d)
            shapes[f"{p}.b"] = (4 * d,)
    shapes["dec.fc.w"] = (2 * d, classes)
    shapes["dec.fc.b"] = (classes,)
    if cfg.shortcut:
        shapes["dec.skip.w"] = (in_channels, classes)
    return shapes


def init_params(cfg: DecoderConfig, in_channels: int, classes: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.hidden
    out = {}
    for name, shape in param_shapes(cfg, in_channels, classes).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
        elif name.endswith((".w_in", ".w_rec")):
            # each gate block gets its own fan
            out[name] = np.concatenate([glorot(rng, (shape[0], d), shape[0], d)
                                        for _ in range(4)], axis=1)
        else:
            out[name] = glorot(rng, shape, shape[0], shape[1])
    return out


def decode(x_seq: Tensor, params: dict[str, Tensor], cfg: DecoderConfig) -> Tensor:
    """[N, L, C] fused features -> [N, L, M] class logits.

    Stacked bidirectional LSTM over the L axis followed by a linear layer;
    with ``shortcut`` a second linear map reads the fused features directly.
    """
    n, L, c = x_seq.shape
    h = x_seq
    for layer in range(cfg.layers):
        p = f"dec.l{layer}"
        fwd = T.lstm(h, params[f"{p}.fwd.w_in"], params[f"{p}.fwd.w_rec"], params[f"{p}.fwd.b"])
        bwd = T.lstm(h, params[f"{p}.bwd.w_in"], params[f"{p}.bwd.w_rec"], params[f"{p}.bwd.b"],
                     reverse=True)
        h = T.concat([fwd, bwd], axis=2)
    logits = T.affine(T.reshape(h, (n * L, 2 * cfg.hidden)), params["dec.fc.w"], params["dec.fc.b"])
    if cfg.shortcut:
        logits = logits + T.matmul(T.reshape(x_seq, (n * L, c)), params["dec.skip.w"])
    return T.reshape(logits, (n, L, logits.shape[1]))
