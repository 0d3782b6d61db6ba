"""Homomorphic encryption backends behind one evaluation interface."""
from .base import AdditiveBackend, Ciphertext, KeyPair, OpCounter, PlainScalar
from .oracle import OracleBackend
from .paillier import PaillierBackend

BACKENDS = {"paillier": PaillierBackend, "oracle": OracleBackend}


def get_backend(name: str) -> AdditiveBackend:
    try:
        return BACKENDS[name]()
    except KeyError:
        raise ValueError(f"unknown additive backend {name!r}") from None


__all__ = ["AdditiveBackend", "Ciphertext", "KeyPair", "OpCounter", "PlainScalar",
           "OracleBackend", "PaillierBackend", "BACKENDS", "get_backend"]
