"""Hybrid defect-aware prompts and their state prototypes.

A defect prompt is ``[W_1..W_l] <defect> anomaly object`` and a normal prompt
``[V_1..V_l] normal object``. ``W`` is one block shared by every defect type,
so registering a new defect name adds no parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import numerics as nx
from .encoders import BackboneWeights, EncoderConfig, PrefixState, Vocabulary, default_vocab, encode_text
from .numerics import RngHandle, Tensor

INIT_STRATEGIES = ("random", "clip_space", "offset")


class DegenerateAggregateError(nx.NumericsError):
    pass


@dataclass(frozen=True)
class Slot:
    """A learnable embedding position: row ``i`` of block ``e`` of ``param``."""

    param: Tensor = field(compare=False)
    source: str
    e: int
    i: int

    def __eq__(self, other):
        return (isinstance(other, Slot) and self.param is other.param
                and (self.source, self.e, self.i) == (other.source, other.e, other.i))

    def __hash__(self):
        return hash((id(self.param), self.source, self.e, self.i))


Entry = Union[Slot, int]


@dataclass
class PromptBank:
    V: Tensor
    W: Tensor
    defect_names: list[str]
    vocab: Vocabulary = field(default_factory=default_vocab)

    def __post_init__(self):
        if self.V.shape != self.W.shape or self.V.ndim != 3:
            raise ValueError(f"V and W must both be E x l x d blocks, got {self.V.shape} and {self.W.shape}")
        if not self.defect_names:
            raise ValueError("at least one defect type is required")
        if len(set(self.defect_names)) != len(self.defect_names):
            raise ValueError(f"duplicate defect names in {self.defect_names}")
        for name in self.defect_names:
            self.vocab.tokenize(name)
        self.defect_names = list(self.defect_names)

    @property
    def E(self) -> int:
        return self.V.shape[0]

    @property
    def l(self) -> int:
        return self.V.shape[1]

    @property
    def K(self) -> int:
        return len(self.defect_names)

    def tensors(self) -> dict[str, Tensor]:
        return {"prompts.V": self.V, "prompts.W": self.W}

    def num_params(self) -> int:
        return self.V.size + self.W.size

    def with_defects(self, names: Sequence[str]) -> PromptBank:
        """A view sharing V and W but carrying a different defect list."""
        return PromptBank(self.V, self.W, list(names), self.vocab)


def init_prompt_bank(strategy: str, stats: tuple[float, float], defect_names: Sequence[str], E: int = 10,
                     l: int = 5, d: int = 64, offset_mult: float = 5.0, rng: RngHandle | None = None,
                     vocab: Vocabulary | None = None) -> PromptBank:
    """Draw V then W. ``random`` is standard normal; ``clip_space`` matches the
    token-embedding mean/std; ``offset`` shifts W's mean by ``offset_mult`` std."""
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")
    mu, sigma = stats
    if strategy != "random" and not sigma > 0:
        raise ValueError("token-embedding std must be positive")
    rng = rng or RngHandle(0, ("prompts",))
    zv = rng.normal(0.0, 1.0, (E, l, d))
    zw = rng.normal(0.0, 1.0, (E, l, d))
    if strategy == "random":
        v, w = zv, zw
    elif strategy == "clip_space":
        v, w = mu + sigma * zv, mu + sigma * zw
    else:
        v, w = mu + sigma * zv, (mu + offset_mult * sigma) + sigma * zw
    return PromptBank(Tensor(v, requires_grad=True, name="prompts.V"),
                      Tensor(w, requires_grad=True, name="prompts.W"),
                      list(defect_names), vocab or default_vocab())


def build_defect_prompt(bank: PromptBank, e: int, defect: str) -> list[Entry]:
    if not 0 <= e < bank.E:
        raise IndexError(f"prompt index {e} outside [0, {bank.E})")
    if defect not in bank.defect_names:
        bank.vocab.tokenize(defect)
        raise KeyError(f"defect {defect!r} is not registered")
    slots: list[Entry] = [Slot(bank.W, "W", e, i) for i in range(bank.l)]
    return slots + bank.vocab.tokenize(defect) + bank.vocab.tokenize("anomaly object")


def build_normal_prompt(bank: PromptBank, e: int) -> list[Entry]:
    if not 0 <= e < bank.E:
        raise IndexError(f"prompt index {e} outside [0, {bank.E})")
    return [Slot(bank.V, "V", e, i) for i in range(bank.l)] + bank.vocab.tokenize("normal object")


def register_unseen_defect(bank: PromptBank, name: str) -> list[str]:
    """Add a defect type with no training; the shared W block is reused as is."""
    bank.vocab.tokenize(name)
    if name in bank.defect_names:
        raise ValueError(f"defect {name!r} already registered")
    bank.defect_names.append(name)
    return bank.defect_names


def read_defect_list(path: str | Path) -> list[str]:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [n for n in names if n != "normal"]


def write_defect_list(names: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(names) + "\n", encoding="utf-8")


@dataclass
class StatePrototypes:
    z_N: Tensor  # (d,)
    z_D: Tensor  # (K, d)

    @property
    def all(self) -> Tensor:
        """(K+1, d) rows, normal first."""
        return nx.concat([self.z_N.reshape(1, -1), self.z_D], axis=0)

    @property
    def K(self) -> int:
        return self.z_D.shape[0]


def _state_sequences(bank: PromptBank, w: BackboneWeights) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Embedded prompt batch (E*(K+1), L, d) ordered state-major, normal first."""
    vocab = bank.vocab
    emb = w["text.tok_emb"]
    states = [(bank.V, vocab.tokenize("normal object"))]
    states += [(bank.W, vocab.tokenize(name) + vocab.tokenize("anomaly object")) for name in bank.defect_names]
    L = 2 + bank.l + max(len(lit) for _, lit in states)
    E, d = bank.E, bank.V.shape[2]
    rows, eots, lengths = [], [], []
    for block, literal in states:
        tail = literal + [vocab.end_id] + [vocab.pad_id] * (L - 2 - bank.l - len(literal))
        start = nx.broadcast_to(emb[np.array([[vocab.start_id]])], (E, 1, d))
        rest = nx.broadcast_to(emb[np.array([tail])], (E, len(tail), d))
        rows.append(nx.concat([start, block, rest], axis=1))
        eot = 1 + bank.l + len(literal)
        eots += [eot] * E
        lengths += [eot + 1] * E
    return nx.concat(rows, axis=0), np.array(eots), np.array(lengths)


def embed_prompt(seq: Sequence[Entry], w: BackboneWeights, cfg: EncoderConfig, vocab: Vocabulary,
                 prefix: PrefixState | None = None) -> Tensor:
    """Text embedding (d,) of a single mixed slot/token sequence."""
    emb = w["text.tok_emb"]
    pieces = [emb[np.array([vocab.start_id])]]
    for entry in seq:
        if isinstance(entry, Slot):
            pieces.append(entry.param[entry.e, entry.i].reshape(1, -1))
        else:
            pieces.append(emb[np.array([entry])])
    pieces.append(emb[np.array([vocab.end_id])])
    x = nx.concat(pieces, axis=0).reshape(1, len(pieces), -1)
    return encode_text(x, [len(pieces) - 1], w, cfg, prefix)[0]


def embed_state_prototypes(bank: PromptBank, w: BackboneWeights, cfg: EncoderConfig,
                           prefix: PrefixState | None = None) -> StatePrototypes:
    """``z_N`` and ``z_D[k]``: normalised means over the E prompt embeddings of each state."""
    x, eot, lengths = _state_sequences(bank, w)
    z = encode_text(x, eot, w, cfg, prefix, lengths)
    per_state = z.reshape(bank.K + 1, bank.E, -1).mean(axis=1)
    per_state = nx.l2_normalize(per_state, axis=-1)
    return StatePrototypes(per_state[0], per_state[1:])


def aggregate_abnormal(protos: StatePrototypes, mode: str = "mean", z_x: Tensor | None = None,
                       tau_agg: float = 0.07) -> Tensor:
    """Single abnormal prototype: (d,) for ``mean``; (B, d) for ``attention``
    with a batch of image embeddings."""
    if protos.K == 0:
        raise ValueError("no defect prototypes to aggregate")
    if mode == "mean":
        agg = protos.z_D.mean(axis=0)
    elif mode == "attention":
        if z_x is None:
            raise ValueError("attention aggregation needs the image embedding")
        scores = nx.matmul(z_x if z_x.ndim == 2 else z_x.reshape(1, -1), protos.z_D.swapaxes(0, 1))
        weights = nx.softmax(scores * (1.0 / tau_agg), axis=-1)
        agg = nx.matmul(weights, protos.z_D)
        if z_x.ndim == 1:
            agg = agg[0]
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    norms = np.linalg.norm(agg.data, axis=-1)
    if np.any(norms < 1e-12):
        raise DegenerateAggregateError("abnormal prototypes cancel out; aggregate has zero norm")
    return nx.l2_normalize(agg, axis=-1)
