import numpy as np
import pytest

from goatlab.errors import DomainError
from goatlab.numkit import Rng, svd
from goatlab.svdseg import (
    Strategy,
    best_rank_r_block,
    block_decompose,
    build_expert,
    build_single_lora_init,
    make_segments,
    segment_matrix,
)

D4321 = np.diag([4.0, 3.0, 2.0, 1.0])


def starts(strategy, **kw):
    return [s.start for s in make_segments(8, 8, 2, 4, strategy, **kw)]


def test_segment_starts_hand_values():
    assert starts("O") == [0, 4]
    assert starts("P") == [0, 2]
    assert starts("M") == [6, 4]


def test_single_expert_covers_spectrum():
    for st in "OPMR":
        segs = make_segments(6, 6, 1, 6, st, rng=Rng(0))
        assert [(s.start, s.width) for s in segs] == [(0, 6)]


def test_random_segments_disjoint_and_seeded():
    for seed in range(20):
        segs = make_segments(64, 64, 8, 16, "R", rng=Rng(seed))
        cells = {s.start for s in segs}
        assert len(cells) == 8 and all(s.start % 2 == 0 and s.stop <= 64 for s in segs)
    assert starts("R", rng=Rng(3)) == starts("R", rng=Rng(3))


def test_segment_errors():
    with pytest.raises(DomainError):
        make_segments(8, 8, 3, 4, "O")
    with pytest.raises(DomainError):
        make_segments(4, 4, 2, 6, "O")
    with pytest.raises(DomainError):
        make_segments(8, 8, 2, 4, "R")
    with pytest.raises(DomainError):
        Strategy.parse("X")
    assert Strategy.parse("minor") is Strategy.MINOR


def test_build_expert_reconstructs_band_over_rho():
    f = svd(np.diag([4.0, 1.0]))
    spec = make_segments(2, 2, 1, 2, "O")[0]
    e = build_expert(f, spec, s=4.0, rho=1.0)
    assert np.allclose(e.delta(), np.diag([4.0, 1.0]), atol=1e-10)
    w = Rng(0).normal((10, 8))
    f = svd(w)
    spec = make_segments(10, 8, 4, 8, "O")[1]
    e1, e10 = build_expert(f, spec, 2.0, 1.0), build_expert(f, spec, 2.0, 10.0)
    assert np.isclose(np.linalg.norm(e1.product()) / np.linalg.norm(e10.product()), 10.0)
    assert np.allclose(build_expert(f, spec, 2.0, 3.0).delta(), build_expert(f, spec, 8.0, 3.0).delta(), atol=1e-12)
    assert np.allclose(e1.delta(), segment_matrix(f, spec), atol=1e-12)
    with pytest.raises(DomainError):
        build_expert(f, spec, 0.0, 1.0)


def test_block_decomposition_hand_values():
    dec = block_decompose(D4321, 2)
    assert np.allclose(dec.block(0), np.diag([4.0, 3.0, 0, 0]))
    assert np.isclose(dec.block_norm(0), 5.0) and np.isclose(dec.block_norm(1), np.sqrt(5.0))
    assert best_rank_r_block(dec) == 0
    assert np.isclose(np.linalg.norm(D4321 - dec.block(0)), np.sqrt(5.0))
    assert np.isclose(np.linalg.norm(D4321 - dec.block(1)), 5.0)


def test_block_decomposition_full_rank_and_energy():
    w = Rng(1).normal((8, 8))
    assert np.allclose(block_decompose(w, 8).block(0), w, atol=1e-10)
    dec = block_decompose(w, 2)
    energy = sum(np.linalg.norm(dec.block(i)) ** 2 for i in range(len(dec)))
    assert np.isclose(energy, np.linalg.norm(w) ** 2, rtol=1e-9)
    assert np.allclose(dec.reconstruct(), w, atol=1e-10)
    dec3 = block_decompose(w, 3)
    assert dec3.bounds[-1] == (6, 8)
    with pytest.raises(DomainError):
        block_decompose(w, 0)
    with pytest.raises(DomainError):
        block_decompose(w, 9)


def test_best_block_with_equal_singular_values():
    assert best_rank_r_block(block_decompose(np.eye(4), 2)) == 0


def test_single_lora_residuals():
    f = svd(D4321)
    pair, frozen = build_single_lora_init(D4321, f, "PiSSA", 2, 2.0)
    assert np.allclose(frozen, np.diag([0, 0, 2.0, 1.0]), atol=1e-12)
    assert np.allclose(frozen + pair.delta(), D4321, atol=1e-12)
    pair, frozen = build_single_lora_init(D4321, f, "MiLoRA", 2, 2.0)
    assert np.allclose(frozen, np.diag([4.0, 3.0, 0, 0]), atol=1e-12)
    for v in ("PiSSA", "MiLoRA"):
        _, frozen = build_single_lora_init(D4321, f, v, 4, 2.0)
        assert np.allclose(frozen, 0, atol=1e-12)
