"""Shared helpers for the test suite: tiny-geometry networks and subjects
that keep GAN training steps fast enough for unit tests."""

import numpy as np
import pytest

from mr2ct.autocontext import pooled_ct_norm
from mr2ct.networks import build_discriminator, build_generator
from mr2ct.phantom import PhantomConfig, generate_pair
from mr2ct.volume import PatchSpec, normalize

TINY_PLAN = [2, 2]
TINY_SPEC = PatchSpec(input_size=20, output_size=16, stride=8)
REDUCED_PLAN = [8, 8, 8, 16, 16, 16, 8, 8]


def tiny_pairs(n=2, seed=7, dims=(36, 36, 36)):
    return [generate_pair(PhantomConfig(dims=dims, seed=seed + k)) for k in range(n)]


def tiny_subjects(n=2, seed=7):
    """Normalized (mr, ct, context=None) triples for make_patch_sampler."""
    pairs = tiny_pairs(n, seed)
    ct_norm = pooled_ct_norm([ct for _, ct in pairs])
    return [(normalize(mr, "zero-mean-unit-var")[0], ct_norm.apply(ct), None)
            for mr, ct in pairs]


def tiny_nets(seed=0):
    return (build_generator(1, TINY_PLAN, seed=seed),
            build_discriminator(seed=seed + 1))


def snapshot(net):
    return {name: arr.copy() for name, arr in net.named_arrays().items()}


def assert_bitwise_equal(a: dict, b: dict):
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name], err_msg=name)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


#: one line per acceptance criterion, echoed after the test summary so the
#: PASS/FAIL verdicts are visible even for passing tests
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
