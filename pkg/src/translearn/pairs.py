"""Unsupervised positive/negative pairs for the similarity-preserving constraint."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .datamodel import Domain


class PairKind(str, enum.Enum):
    POS_SRC = "pos_src"  # (x_s, G(x_s))
    POS_TGT = "pos_tgt"  # (x_t, F(x_t))
    NEG_SRC = "neg_src"  # (G(x_s), x_t)
    NEG_TGT = "neg_tgt"  # (F(x_t), x_s)


# domain each member was drawn from
_ORIGIN = {
    PairKind.POS_SRC: (Domain.SOURCE, Domain.SOURCE),
    PairKind.POS_TGT: (Domain.TARGET, Domain.TARGET),
    PairKind.NEG_SRC: (Domain.SOURCE, Domain.TARGET),
    PairKind.NEG_TGT: (Domain.TARGET, Domain.SOURCE),
}


@dataclass
class ContrastivePair:
    """One pair kind over a batch: row k of ``left`` pairs with row k of ``right``."""

    left: torch.Tensor
    right: torch.Tensor
    kind: PairKind

    @property
    def label_i(self) -> int:
        return int(self.kind in (PairKind.POS_SRC, PairKind.POS_TGT))

    @property
    def origins(self) -> tuple[Domain, Domain]:
        return _ORIGIN[self.kind]

    def __len__(self) -> int:
        return self.left.shape[0]


def build_pairs(x_s: torch.Tensor, x_t: torch.Tensor, G=None, F=None, *,
                translated: tuple[torch.Tensor, torch.Tensor] | None = None) -> list[ContrastivePair]:
    """Two positive and two negative pairs per ``(x_s[k], x_t[k])`` couple.

    Translated images come from ``G``/``F`` (or are passed precomputed as
    ``translated=(G(x_s), F(x_t))``) and keep their autograd history, so a
    loss on the pairs reaches the generators. No labels are consulted.
    """
    if x_s.shape[0] != x_t.shape[0]:
        raise ValueError(f"batch size mismatch: {x_s.shape[0]} source vs {x_t.shape[0]} target images")
    if translated is None:
        if G is None or F is None:
            raise ValueError("need G and F, or precomputed translations")
        translated = (G(x_s), F(x_t))
    g_xs, f_xt = translated
    return [
        ContrastivePair(x_s, g_xs, PairKind.POS_SRC),
        ContrastivePair(x_t, f_xt, PairKind.POS_TGT),
        ContrastivePair(g_xs, x_t, PairKind.NEG_SRC),
        ContrastivePair(f_xt, x_s, PairKind.NEG_TGT),
    ]
