"""Class prototypes from a frozen text-encoder stand-in and learnable prompts.

The text encoder is a fixed seeded map: per-token embeddings, mean over the
prompt sequence, then two affine+tanh layers into feature space.  Its
weights are buffers, never parameters, so no optimizer can touch them.
Gradients flow only into the learnable prompt context (and the separate
background embedding).

Prototype container format (bit-exact, little-endian):
    bytes 0..7   magic ``RRPROTO1``
    u32          version (currently 1)
    u32          N  (number of class prototypes)
    u32          d  (vector dimension)
    (N+1) * d    float32 rows: row 0 is the background vector, rows 1..N
                 the class prototypes in class order
    u32          byte length of the names blob
    bytes        UTF-8 class names, newline-separated, no trailing newline
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

PROTO_MAGIC = b"RRPROTO1"
PROTO_VERSION = 1

CLASS_PLACEHOLDER = "[CLASS]"

# Initialization scales: prompt context and background start near zero so
# early prototypes are dominated by the frozen token content.
_CONTEXT_STD = 0.02
_BACKGROUND_STD = 0.02


class PrototypeError(ValueError):
    """Tokenization failure or malformed prototype container."""


def _token_generator(seed: int, token: str) -> torch.Generator:
    # Stable per-token stream: embeddings do not shift when the vocabulary
    # grows, and do not depend on Python's salted hash().
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    value = int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
    return torch.Generator().manual_seed(value)


def tokenize(text: str) -> list[str]:
    """Lower-cased whitespace tokens."""
    return text.lower().split()


class FrozenTextEncoder(nn.Module):
    """Deterministic seeded map from token sequences to feature space.

    All state lives in buffers; the module owns no trainable parameters,
    so it is byte-identical before and after any training run.
    """

    def __init__(
        self,
        vocabulary: tuple[str, ...],
        token_dim: int = 512,
        out_dim: int = 64,
        hidden_dim: int = 256,
        token_scale: float = 3.0,
        gain: float = 3.0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        words = tuple(sorted(set(vocabulary)))
        if not words:
            raise PrototypeError("vocabulary is empty")
        self.vocabulary = words
        self.token_dim = token_dim
        self.out_dim = out_dim
        self._index = {w: i for i, w in enumerate(words)}
        table = torch.stack(
            [
                torch.randn(token_dim, generator=_token_generator(seed, w), dtype=dtype)
                for w in words
            ]
        ) * token_scale
        g = torch.Generator().manual_seed(seed + 0x5EED)
        self.register_buffer("token_table", table)
        self.register_buffer(
            "mix_w1",
            torch.randn(hidden_dim, token_dim, generator=g, dtype=dtype)
            * (gain * token_dim**-0.5),
        )
        self.register_buffer("mix_b1", torch.randn(hidden_dim, generator=g, dtype=dtype) * 0.1)
        self.register_buffer(
            "mix_w2", torch.randn(out_dim, hidden_dim, generator=g, dtype=dtype) * hidden_dim**-0.5
        )
        self.register_buffer("mix_b2", torch.randn(out_dim, generator=g, dtype=dtype) * 0.1)

    @classmethod
    def from_class_names(
        cls,
        class_names: tuple[str, ...],
        template: str = "",
        **kwargs,
    ) -> "FrozenTextEncoder":
        """Vocabulary = words of the class names plus the template words."""
        words: list[str] = []
        for name in class_names:
            words.extend(tokenize(name))
        if template:
            words.extend(t for t in tokenize(template) if t != CLASS_PLACEHOLDER.lower())
        return cls(tuple(words), **kwargs)

    def token_embeddings(self, text: str) -> torch.Tensor:
        """[L, token_dim] embeddings of the whitespace tokens of ``text``."""
        rows = []
        for tok in tokenize(text):
            if tok not in self._index:
                raise PrototypeError(f"unknown token {tok!r} (not in the configured vocabulary)")
            rows.append(self.token_table[self._index[tok]])
        if not rows:
            raise PrototypeError(f"no tokens in {text!r}")
        return torch.stack(rows)

    def encode_sequence(self, sequence: torch.Tensor) -> torch.Tensor:
        """[L, token_dim] sequence -> [out_dim] via mean + two affine+tanh layers."""
        pooled = sequence.mean(dim=0)
        h = torch.tanh(self.mix_w1 @ pooled + self.mix_b1)
        return torch.tanh(self.mix_w2 @ h + self.mix_b2)


class PromptContext(nn.Module):
    """K learnable context vectors prepended to every class name."""

    def __init__(self, length: int = 8, token_dim: int = 32, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if length < 1:
            raise PrototypeError("prompt context length must be >= 1")
        g = torch.Generator().manual_seed(seed)
        self.vectors = nn.Parameter(
            torch.randn(length, token_dim, generator=g, dtype=dtype) * _CONTEXT_STD
        )

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


def init_background(out_dim: int, seed: int = 0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(out_dim, generator=g, dtype=dtype) * _BACKGROUND_STD


@dataclass
class PrototypeSet:
    """Class prototype rows plus the standalone background vector."""

    prototypes: torch.Tensor  # [N, d]
    background: torch.Tensor  # [d]
    class_names: tuple[str, ...]
    frozen: bool = False

    def __post_init__(self):
        if self.prototypes.dim() != 2 or self.prototypes.shape[0] < 1:
            raise PrototypeError("prototypes must be a non-empty [N, d] tensor")
        if self.background.shape != self.prototypes.shape[1:]:
            raise PrototypeError("background dimension does not match prototypes")
        if len(self.class_names) != self.prototypes.shape[0]:
            raise PrototypeError("one class name per prototype row required")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def stacked(self) -> torch.Tensor:
        """[N+1, d] with the background as row 0."""
        return torch.cat([self.background.unsqueeze(0), self.prototypes], dim=0)


def build_prompt_sequence(
    context: PromptContext, class_name: str, encoder: FrozenTextEncoder
) -> torch.Tensor:
    """Context vectors followed by the class-name token embeddings."""
    return torch.cat([context.vectors, encoder.token_embeddings(class_name)], dim=0)


def build_template_sequence(
    template: str, class_name: str, encoder: FrozenTextEncoder
) -> torch.Tensor:
    """Token embeddings of a hand-crafted template with ``[CLASS]`` filled in."""
    if CLASS_PLACEHOLDER not in template:
        raise PrototypeError(f"template must contain {CLASS_PLACEHOLDER}: {template!r}")
    return encoder.token_embeddings(template.replace(CLASS_PLACEHOLDER, class_name))


def encode_prototypes(
    context: PromptContext,
    class_names: tuple[str, ...],
    encoder: FrozenTextEncoder,
    background: torch.Tensor,
) -> PrototypeSet:
    """One prototype per class through the frozen map; gradients reach only
    the context vectors and the background (passed through unchanged)."""
    rows = [
        encoder.encode_sequence(build_prompt_sequence(context, name, encoder))
        for name in class_names
    ]
    return PrototypeSet(torch.stack(rows), background, tuple(class_names))


def encode_template_prototypes(
    template: str,
    class_names: tuple[str, ...],
    encoder: FrozenTextEncoder,
    background: torch.Tensor,
) -> PrototypeSet:
    """Hand-crafted prompt mode: no learnable context, no prompt training."""
    rows = [
        encoder.encode_sequence(build_template_sequence(template, name, encoder))
        for name in class_names
    ]
    return PrototypeSet(torch.stack(rows), background, tuple(class_names))


def save_prototypes(pset: PrototypeSet, path: str | Path) -> None:
    """Write the documented binary container (see module docstring)."""
    n, d = pset.n_classes, pset.dim
    rows = (
        torch.cat([pset.background.detach().unsqueeze(0), pset.prototypes.detach()], dim=0)
        .to(torch.float32)
        .numpy()
        .astype("<f4")
    )
    names_blob = "\n".join(pset.class_names).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PROTO_MAGIC)
        fh.write(struct.pack("<III", PROTO_VERSION, n, d))
        fh.write(rows.tobytes(order="C"))
        fh.write(struct.pack("<I", len(names_blob)))
        fh.write(names_blob)


def load_prototypes(path: str | Path, expected_dim: int | None = None) -> PrototypeSet:
    """Read the container back; the loaded set is marked frozen."""
    blob = Path(path).read_bytes()
    if len(blob) < len(PROTO_MAGIC) + 12 or blob[: len(PROTO_MAGIC)] != PROTO_MAGIC:
        raise PrototypeError(f"not a prototype container: {path}")
    off = len(PROTO_MAGIC)
    version, n, d = struct.unpack_from("<III", blob, off)
    off += 12
    if version != PROTO_VERSION:
        raise PrototypeError(f"unsupported prototype container version {version}")
    if expected_dim is not None and d != expected_dim:
        raise PrototypeError(f"prototype dimension {d} does not match configured {expected_dim}")
    need = (n + 1) * d * 4
    if len(blob) < off + need + 4:
        raise PrototypeError(f"truncated prototype container: {path}")
    rows = np.frombuffer(blob, dtype="<f4", count=(n + 1) * d, offset=off).reshape(n + 1, d)
    off += need
    (names_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + names_len:
        raise PrototypeError(f"truncated prototype container: {path}")
    names = tuple(blob[off : off + names_len].decode("utf-8").split("\n"))
    if len(names) != n:
        raise PrototypeError(f"expected {n} class names, found {len(names)}")
    tensor = torch.from_numpy(rows.copy())
    return PrototypeSet(tensor[1:], tensor[0], names, frozen=True)
