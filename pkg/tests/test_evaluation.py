"""Evaluation: metric oracles, judge gating, protocol ceilings/baselines."""

import numpy as np
import pytest

from attredit import tensor as T
from attredit.data import SynthSpec, render_edited, synth_dataset, to_uint8
from attredit.errors import EvalGateError
from attredit.evaluation import (AttributeClassifier, EvalReport,
                                 attribute_generation_accuracy,
                                 classifier_accuracy, evaluate,
                                 load_classifier, psnr, report_table,
                                 reconstruction_eval, save_classifier, ssim,
                                 to_255, train_attribute_classifier,
                                 variant_config)
from attredit.networks import GeneratorConfig, build_models
from attredit.nn import param_checksum
from attredit.training import TrainConfig

from oracles import psnr_255

SPEC = SynthSpec(image_size=32, seed=31, train=192, val=0, test=48)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(SPEC)


@pytest.fixture(scope="module")
def judge(data):
    clf, acc = train_attribute_classifier(data["train"], data["test"],
                                          seed=2, epochs=8)
    return clf, acc


class IdentityGenerator:
    """Stands in for a generator that copies its input."""

    def __init__(self, cfg):
        self.cfg = cfg

    def generate(self, x, att):
        return T.tensor(x.data.copy())

    def parameters(self):
        return []


# ----------------------------------------------------------------- psnr

def test_psnr_identity_capped():
    img = np.random.default_rng(0).uniform(0, 255, (3, 16, 16))
    assert psnr(img, img) == 99.0


def test_psnr_constant_offset_closed_form():
    a = np.full((3, 16, 16), 100.0)
    b = a + 10.0
    want = 10 * np.log10(255.0 ** 2 / 100.0)
    assert psnr(a, b) == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(28.13, abs=0.01)


def test_psnr_matches_independent_formula():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 255, (3, 20, 20))
    b = rng.uniform(0, 255, (3, 20, 20))
    assert psnr(a, b) == pytest.approx(psnr_255(a, b), abs=1e-9)


# ----------------------------------------------------------------- ssim

def test_ssim_identity_is_one():
    img = np.random.default_rng(2).uniform(0, 255, (3, 32, 32))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_negative_image_is_low(data):
    img = to_255(data["test"].images[0])
    assert ssim(img, 255.0 - img) < 0.2


def test_ssim_matches_reference_implementation(data):
    skimage = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    a = to_255(data["test"].images[1])
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
    got = ssim(a, b)
    want = np.mean([
        skimage.structural_similarity(
            a[c], b[c], gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=255.0)
        for c in range(3)])
    assert got == pytest.approx(want, abs=1e-4)


# ------------------------------------------------------------ classifier

def test_judge_reaches_floor_on_synthetic(judge):
    clf, acc = judge
    assert acc >= 0.97


def test_untrained_classifier_near_chance(data):
    clf = AttributeClassifier(32, 5, np.random.default_rng(0))
    acc = classifier_accuracy(clf, data["test"])
    assert 0.3 <= acc <= 0.7


def test_classifier_deterministic_at_inference(data, judge):
    clf, _ = judge
    a = clf.predict(data["test"].images)
    b = clf.predict(data["test"].images)
    assert np.array_equal(a, b)


def test_classifier_checkpoint_roundtrip(tmp_path, data, judge):
    clf, acc = judge
    save_classifier(tmp_path / "clf.ckpt", clf, acc, data["test"].attr_names)
    clf2, acc2 = load_classifier(tmp_path / "clf.ckpt")
    assert acc2 == pytest.approx(acc)
    assert np.array_equal(clf.predict(data["test"].images),
                          clf2.predict(data["test"].images))


# ------------------------------------------------------------- accuracy

def test_floor_gate_refuses_bad_judge(data):
    clf = AttributeClassifier(32, 5, np.random.default_rng(1))
    with pytest.raises(EvalGateError):
        attribute_generation_accuracy(None, clf, 0.5, data["test"])


def test_identity_generator_scores_near_zero(data, judge):
    clf, acc = judge
    gen = IdentityGenerator(GeneratorConfig(image_size=32, attr_count=5))
    accs = attribute_generation_accuracy(gen, clf, acc, data["test"])
    # unedited images classify as their source labels, not the target
    assert np.mean(list(accs.values())) < 0.2


def test_renderer_oracle_scores_near_ceiling(data, judge):
    clf, acc = judge
    ds = data["test"]

    def renderer_edit(images, att_s, att_t):
        out = np.zeros_like(images)
        for i in range(images.shape[0]):
            idx = int(ds.ids[i].split("-")[1])
            u8 = render_edited(SPEC, "test", idx, att_t[i])
            out[i] = (u8.astype(np.float32) / 127.5) - 1.0
        return out

    accs = attribute_generation_accuracy(None, clf, acc, ds,
                                         edit_fn=renderer_edit)
    assert np.mean(list(accs.values())) >= 0.97


def test_per_attribute_consistent_with_mean(data, judge):
    clf, acc = judge
    gen = IdentityGenerator(GeneratorConfig(image_size=32, attr_count=5))
    rep = evaluate(gen, clf, acc, data["test"])
    assert rep.mean_accuracy == pytest.approx(
        np.mean(list(rep.per_attribute.values())))


# -------------------------------------------------------- reconstruction

def test_identity_generator_reconstruction_is_perfect(data):
    gen = IdentityGenerator(GeneratorConfig(image_size=32, attr_count=5))
    p, s = reconstruction_eval(gen, data["test"])
    assert p == 99.0
    assert s == pytest.approx(1.0, abs=1e-9)


def test_evaluation_does_not_mutate_parameters(data, judge):
    clf, acc = judge
    gen, _ = build_models(GeneratorConfig(image_size=32, attr_count=5,
                                          width_factor=0.0625), seed=4)
    before = param_checksum(gen.parameters())
    evaluate(gen, clf, acc, data["test"].subset(range(8)))
    assert param_checksum(gen.parameters()) == before


# ------------------------------------------------------------- reporting

def test_report_validation_bounds():
    with pytest.raises(Exception):
        EvalReport(per_attribute={"a": 1.2}, mean_accuracy=1.2,
                   psnr=30.0, ssim=0.9).validate()


def test_report_table_layout():
    rep = EvalReport(per_attribute={"a": 0.5, "b": 1.0}, mean_accuracy=0.75,
                     psnr=30.0, ssim=0.9).validate()
    txt = report_table([("standard", rep), ("dst", rep)])
    lines = txt.splitlines()
    assert lines[0].split()[:2] == ["variant", "a"]
    assert any(l.startswith("standard") for l in lines)
    assert any(l.startswith("dst") for l in lines)


def test_variant_config_mapping():
    base = TrainConfig(net=GeneratorConfig(image_size=32, attr_count=5))
    assert variant_config(base, "dst").net.conditioning == "target"
    assert variant_config(base, "skip_raw2").net.skip_mode == "raw2"
    assert variant_config(base, "gru_output").net.stu_variant == "gru_output"
    assert variant_config(base, "standard").net.skip_mode == "stu"
    with pytest.raises(Exception):
        variant_config(base, "nope")
