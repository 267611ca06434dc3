"""Entailment-tree construction and evaluation."""

from .tree import (
    HYPOTHESIS,
    EntailmentTree,
    Fact,
    NodeId,
    NodeKind,
    ParseError,
    Step,
    ValidationError,
    leaf_descendants,
    node_level,
    parse_proof,
    serialize_proof,
    validate_tree,
)

__version__ = "0.1.0"

__all__ = [
    "HYPOTHESIS",
    "EntailmentTree",
    "Fact",
    "NodeId",
    "NodeKind",
    "ParseError",
    "Step",
    "ValidationError",
    "leaf_descendants",
    "node_level",
    "parse_proof",
    "serialize_proof",
    "validate_tree",
]
