from pathlib import Path

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonlab.encoder import (DegenerateScoresError, build_prompts, classify_from_cosines,
                               cosine_similarities, load_encoder, save_encoder,
                               scores_from_cosines, toy_encoder, zero_shot_classify,
                               zero_shot_scores)
from poisonlab.errors import EncoderError

TINY_CLIP = Path(__file__).parent / "fixtures" / "tiny_clip"
# recorded once from the tiny checkpoint on the linspace image below
TINY_CLIP_COS = {"cat": 0.11300425976514816, "dog": -0.11955374479293823}


def _image(seed=0, shape=(3, 32, 32)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed))


def test_prompt_template(toy):
    p = build_prompts(["cat", "dog"], toy)
    assert p.prompts == ("a photo of a cat", "a photo of a dog")
    with pytest.raises(EncoderError, match="need >=2 classes"):
        build_prompts(["cat"], toy)


def test_prompt_embeddings_deterministic(toy):
    a = build_prompts(["cat", "dog", "ship"], toy)
    b = build_prompts(["cat", "dog", "ship"], toy)
    assert a.embeddings.shape == (3, 64)
    assert torch.equal(a.embeddings, b.embeddings)


def test_linear_scores_arithmetic():
    assert torch.allclose(scores_from_cosines(torch.tensor([0.6, 0.2])),
                          torch.tensor([0.75, 0.25]))
    assert torch.allclose(scores_from_cosines(torch.full((5,), 0.3)), torch.full((5,), 0.2))
    with pytest.raises(DegenerateScoresError):
        scores_from_cosines(torch.tensor([0.5, -0.5]))


def test_scores_match_hand_oracle(toy, toy_prompts):
    x = _image()
    got = zero_shot_scores(toy, toy_prompts, x)
    # independent path: raw dot products and norms, no F.normalize
    v = toy.image_tower(x.unsqueeze(0))[0]
    t = toy_prompts.embeddings
    cos = torch.stack([(v @ t[i]) / (v.norm() * t[i].norm()) for i in range(len(t))])
    assert torch.allclose(got, cos / cos.sum(), atol=1e-5)
    assert abs(float(got.sum()) - 1.0) < 1e-5


def test_classify_argmax_rules():
    assert int(classify_from_cosines(torch.tensor([0.1, 0.9, 0.3]))) == 1
    assert int(classify_from_cosines(torch.tensor([0.5, 0.5]))) == 0
    cos = torch.tensor([[0.1, 0.9, 0.3], [0.4, 0.2, 0.4]])
    assert torch.equal(classify_from_cosines(cos), classify_from_cosines(2 * cos))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10))
def test_classify_invariant_under_embedding_scaling(seed, scale):
    gen = torch.Generator().manual_seed(seed)
    img, txt = torch.randn(4, 8, generator=gen), torch.randn(3, 8, generator=gen)
    cos = F.normalize(img, dim=-1) @ F.normalize(txt, dim=-1).T
    cos2 = F.normalize(scale * img, dim=-1) @ F.normalize(scale * txt, dim=-1).T
    assert torch.equal(classify_from_cosines(cos), classify_from_cosines(cos2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scores_sum_to_one(toy, toy_prompts, seed):
    cos = cosine_similarities(toy, toy_prompts, _image(seed))
    if cos.sum().abs() < 1e-3:
        return
    assert abs(float(zero_shot_scores(toy, toy_prompts, _image(seed)).sum()) - 1.0) < 1e-5


def test_score_gradient_matches_finite_differences(toy, toy_prompts):
    enc = toy.to(torch.float64)
    x = _image(3).double().requires_grad_(True)
    s = zero_shot_scores(enc, toy_prompts, x)[1]
    (grad,) = torch.autograd.grad(s, x)
    gen = torch.Generator().manual_seed(0)
    idx = torch.randperm(x.numel(), generator=gen)[:100]
    h = 1e-3
    flat = x.detach().flatten()
    for i in idx.tolist():
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        fd = (zero_shot_scores(enc, toy_prompts, up.view_as(x))[1]
              - zero_shot_scores(enc, toy_prompts, down.view_as(x))[1]) / (2 * h)
        g = grad.flatten()[i]
        assert abs(float(fd - g)) <= 1e-3 * max(abs(float(g)), abs(float(fd)), 1e-6) + 1e-9


def test_zero_shot_classify_returns_index(toy, toy_prompts):
    assert zero_shot_classify(toy, toy_prompts, _image()) in (0, 1, 2)
    assert zero_shot_classify(toy, toy_prompts, torch.stack([_image(), _image(1)])).shape == (2,)


def test_toy_adapter_repeatable():
    a = load_encoder(adapter_id="toy", seed=7)
    b = load_encoder(adapter_id="toy", seed=7)
    assert a.d == 64
    x = _image()
    assert torch.equal(a.image_embed(x), b.image_embed(x))
    assert not torch.equal(a.image_embed(x), toy_encoder(seed=8).image_embed(x))


def test_projection_save_load(tmp_path, toy):
    path = save_encoder(toy, tmp_path / "enc.safetensors")
    back = load_encoder(path, "projection")
    x = _image()
    assert torch.equal(back.image_embed(x), toy.image_embed(x))
    assert torch.equal(back.text_embed("a photo of a cat"), toy.text_embed("a photo of a cat"))


def test_mismatched_tower_dims(tmp_path):
    from safetensors.torch import load_file, save_file
    from safetensors import safe_open

    path = save_encoder(toy_encoder(d=64), tmp_path / "enc.safetensors")
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata()
    tensors = load_file(str(path))
    tensors["text.proj.weight"] = tensors["text.proj.weight"][:32]
    save_file(tensors, str(path), metadata=meta)
    with pytest.raises(EncoderError, match="dimension mismatch"):
        load_encoder(path, "projection")


def test_unreadable_weights(tmp_path):
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"garbage")
    with pytest.raises(EncoderError):
        load_encoder(bad, "projection")
    with pytest.raises(EncoderError):
        load_encoder(tmp_path / "missing", "projection")


def test_clip_adapter_reference_cosine():
    enc = load_encoder(TINY_CLIP, "clip")
    prompts = build_prompts(["cat", "dog"], enc)
    x = torch.linspace(0, 1, 3 * 32 * 32).reshape(3, 32, 32)
    cos = cosine_similarities(enc, prompts, x)
    assert abs(float(cos[1]) - TINY_CLIP_COS["dog"]) < 1e-4
    assert abs(float(cos[0]) - TINY_CLIP_COS["cat"]) < 1e-4
    # same interface as the toy adapter, gradients included
    x = x.clone().requires_grad_(True)
    cosine_similarities(enc, prompts, x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
