"""Quality-diversity data selection for pretraining corpora.

Clusters an embedded candidate pool, treats clusters as bandit arms, scores
sampled instances with Kronecker-factored influence functions on a
desk-scale transformer, and selects a budgeted subset that balances
influence (quality) against cluster coverage (diversity). A brute-force
oracle layer validates every approximation at tiny scale.
"""

from .bandit import BanditConfig, BanditState, cluster_score, run, select_step
from .clustering import ClusterModel, kmeans, objective, sample_from_cluster
from .corpus import (
    CandidateInstance,
    EmbeddingCorpus,
    ReferenceSet,
    load_embeddings,
    load_tokens,
    write_embeddings,
    write_tokens,
)
from .curvature import KroneckerFactor, accumulate, joint_qkv_pack, kron_ihvp
from .influence import (
    IhvpVector,
    InfluenceTable,
    SketchProjector,
    reference_ihvp,
    score_batch,
    score_instance,
    score_instance_sketched,
)
from .model import ModelConfig, ParamSet, backward, forward, grad_of_set, init_params
from .oracle import compare_methods, dense_curvature, exact_influence
from .trainer import TrainConfig, eval_loss, train

__all__ = [
    "BanditConfig",
    "BanditState",
    "CandidateInstance",
    "ClusterModel",
    "EmbeddingCorpus",
    "IhvpVector",
    "InfluenceTable",
    "KroneckerFactor",
    "ModelConfig",
    "ParamSet",
    "ReferenceSet",
    "SketchProjector",
    "TrainConfig",
    "accumulate",
    "backward",
    "cluster_score",
    "compare_methods",
    "dense_curvature",
    "eval_loss",
    "exact_influence",
    "forward",
    "grad_of_set",
    "init_params",
    "joint_qkv_pack",
    "kmeans",
    "kron_ihvp",
    "load_embeddings",
    "load_tokens",
    "objective",
    "reference_ihvp",
    "run",
    "sample_from_cluster",
    "score_batch",
    "score_instance",
    "score_instance_sketched",
    "select_step",
    "train",
    "write_embeddings",
    "write_tokens",
]
