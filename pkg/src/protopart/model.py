"""Composite network: embedding -> prototype layer -> prediction head."""

from __future__ import annotations

from dataclasses import dataclass

from . import embedding as emb
from . import prototypes as proto
from .head import LinearHead, head_parameter_group, predict
from .prototypes import Metric, PrototypeBank, SimilarityMap
from .tensor import Tensor


@dataclass
class ModelOutput:
    features: Tensor          # [B, D, H', W']
    similarities: SimilarityMap
    logits: Tensor            # [B, K]


class ProtoPartModel:
    def __init__(self, embedding_net: emb.EmbeddingNet, bank: PrototypeBank, head: LinearHead):
        self.embedding = embedding_net
        self.bank = bank
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def forward(self, images) -> ModelOutput:
        feat = emb.embed(self.embedding, images)
        sim = proto.similarity_map(feat, self.bank)
        logits = predict(self.head, sim.pooled)
        return ModelOutput(features=feat, similarities=sim, logits=logits)

    def embed(self, images) -> Tensor:
        return emb.embed(self.embedding, images)

    def parameter_groups(self) -> dict:
        groups = dict(emb.parameter_groups(self.embedding))
        groups.update(proto.parameter_groups(self.bank))
        groups["head"] = head_parameter_group(self.head)
        return groups

    def parameters(self) -> list:
        out = []
        for group in self.parameter_groups().values():
            out.extend(group)
        return out


def build_model(num_classes: int, embedding_cfg: emb.EmbeddingConfig, metric,
                prototypes_per_class: int = 2, part_hw: tuple = (1, 1),
                k_for_topk: int = 1, w_pos: float = 1.0, w_neg: float = -0.5,
                seed: int = 0) -> ProtoPartModel:
    net = emb.build_embedding(embedding_cfg, seed=seed)
    bank = proto.build_bank(num_classes, prototypes_per_class, net.output_dim,
                            Metric(metric), part_hw=part_hw, k_for_topk=k_for_topk, seed=seed)
    head = LinearHead(bank.class_of, num_classes, w_pos=w_pos, w_neg=w_neg)
    return ProtoPartModel(net, bank, head)
