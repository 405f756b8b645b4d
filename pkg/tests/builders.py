"""Small hand-built generators for tests with known structure."""
import numpy as np

from amortsteer.generator import Block, make_generator


def identity_block(d, activation="identity", scale=1.0, rng=None):
    gain = np.ones(d) if rng is None else 1.0 + 0.3 * rng.normal(size=d)
    shift = np.zeros(d) if rng is None else 0.3 * rng.normal(size=d)
    return Block(scale * np.eye(d), np.zeros(d), gain, shift, activation)


def one_site_identity(d):
    """Linear -> layer norm with unit gain -> identity head."""
    return make_generator([identity_block(d)], np.eye(d), np.zeros(d))


def two_site_chain(d, rng):
    """Site 2 sees twice the (steered) site-1 activations."""
    return make_generator([identity_block(d, rng=rng), identity_block(d, scale=2.0, rng=rng)], np.eye(d), np.zeros(d))


def tiny_generator(rng, d_in=5, hidden=(4, 3), d_out=3, activation="tanh"):
    dims = [d_in, *hidden]
    blocks = [
        Block(rng.normal(0, 0.7, (a, b)), rng.normal(0, 0.2, b), 1 + 0.2 * rng.normal(size=b), 0.2 * rng.normal(size=b), activation)
        for a, b in zip(dims[:-1], dims[1:])
    ]
    return make_generator(blocks, rng.normal(0, 0.7, (dims[-1], d_out)), rng.normal(0, 0.2, d_out))
