import pytest

from goatlab import costmodel as cm
from goatlab.errors import DomainError


@pytest.mark.parametrize(
    "backbone,method,expected",
    [
        ("roberta-large", "goat", "4.50"),
        ("vit-base", "molora", "2.24"),
        ("llama2-7b", "goat", "0.96"),
        ("vit-base", "fftmoe", "770"),
        ("vit-base", "lora-r32", "5.98"),
        ("roberta-large", "hydralora", "2.75"),
        ("llama2-7b", "adamole", "0.97"),
    ],
)
def test_reported_proportions(backbone, method, expected):
    rep = cm.param_count(cm.get_backbone(backbone), method)
    assert cm.format_percent(rep.proportion) == expected


def test_formula_values():
    spec = cm.get_backbone("roberta-large")
    H, L, r, e = 1024, 24, 32, 8
    assert cm.trainable_params(spec, "molora") == (18 * H * r + 9 * H * e) * L
    assert cm.fft_params(spec) == (12 * H * H + 13 * H) * L + 50265 * H


def test_rounding_modes():
    assert cm.format_percent(1.4959) == "1.49"
    assert cm.format_percent(1.4959, "half-up") == "1.50"
    assert cm.format_percent(697.949, "half-up") == "698"
    assert cm.format_percent(4.00, "truncate") == "4.00"
    with pytest.raises(DomainError):
        cm.format_percent(1.0, "bankers")


def test_unknown_names():
    with pytest.raises(DomainError):
        cm.get_backbone("gpt")
    with pytest.raises(DomainError):
        cm.param_count(cm.get_backbone("llama2-7b"), "fftmoe")
    with pytest.raises(DomainError):
        cm.canonical_method("prefix")


def test_flops_properties():
    spec = cm.with_sequence(cm.get_backbone("llama2-7b"), s_len=512, B=4)
    B, L, H, s, e, r = 4, 32, 4096, 512, 8, 32
    diff = cm.flops_estimate(spec, "goat", k=2) - cm.flops_estimate(spec, "goat", k=1)
    assert diff == pytest.approx(B * L * 69 / 2 * (1 / e) * s * H * r)
    slope = cm.flops_estimate(spec, "fftmoe", k=3) - cm.flops_estimate(spec, "fftmoe", k=2)
    assert slope == pytest.approx(B * L * 41 / 2 * s * H * H)
    for name in cm.BACKBONES:
        sp = cm.with_sequence(cm.get_backbone(name), s_len=256, B=1)
        if sp.V is None:
            continue
        for k in range(2, sp.e + 1):
            assert cm.flops_estimate(sp, "molora", k=k) < cm.flops_estimate(sp, "fftmoe", k=k)
        # at k=1 the dense term is shared and the adapter term tips the balance
        gap = cm.flops_estimate(sp, "molora", k=1) - cm.flops_estimate(sp, "fftmoe", k=1)
        assert gap == pytest.approx(sp.B * sp.L * 69 / 2 / sp.e * sp.s_len * sp.H * sp.r)
    with pytest.raises(DomainError):
        cm.flops_estimate(cm.get_backbone("llama2-7b"), "goat")


def test_flops_vocab_limit():
    big_v = cm.BackboneSpec("tiny", "llama", H=1, L=1, r=8, e=8, V=10**12, s_len=4, B=1)
    ratio = cm.flops_estimate(big_v, "fftmoe") / cm.flops_estimate(big_v, "goat")
    assert ratio == pytest.approx(1.0, rel=1e-9)
