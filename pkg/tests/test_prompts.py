import numpy as np
import pytest
import torch
import torch.nn.functional as F

from prompthoi.boxes import Box
from prompthoi.encoders import RandomProjectionEmbedder
from prompthoi.prompts import (
    PromptBank,
    VisualPromptSpec,
    bank_similarity,
    classify,
    crop,
    encode_textual_prompts,
    encode_visual_prompts,
    union_box,
)


@pytest.fixture(scope="module")
def provider():
    return RandomProjectionEmbedder(16, seed=1)


def test_textual_bank_rows_unit_and_ordered(space, provider):
    bank = encode_textual_prompts([3, 1, 2], space, provider, "object")
    assert bank.category_ids == (3, 1, 2) and bank.modalities == ("text",) * 3
    assert torch.allclose(bank.embeddings.norm(dim=-1), torch.ones(3), atol=1e-6)
    again = encode_textual_prompts([3, 1, 2], space, provider, "object")
    assert torch.equal(bank.embeddings, again.embeddings)
    with pytest.raises(KeyError):
        encode_textual_prompts([len(space.hois)], space, provider, "interaction")
    with pytest.raises(ValueError):
        encode_textual_prompts([0], space, provider, "verb")


def test_bank_validation():
    emb = F.normalize(torch.randn(2, 4), dim=-1)
    with pytest.raises(ValueError):
        PromptBank("object", (1, 1), ("text", "text"), emb)
    with pytest.raises(ValueError):
        PromptBank("object", (1, 2), ("text", "text"), emb * 2)
    with pytest.raises(ValueError):
        PromptBank("object", (), (), emb[:0])
    bank = PromptBank("object", (1, 2), ("text", "text"), emb)
    with pytest.raises(KeyError):
        bank.column(7)
    rebuilt = PromptBank.from_dict(bank.to_dict())
    assert rebuilt.category_ids == bank.category_ids
    assert torch.allclose(rebuilt.embeddings, bank.embeddings, atol=1e-7)


def test_bank_replace_and_extend():
    emb = F.normalize(torch.randn(2, 4), dim=-1)
    bank = PromptBank("object", (1, 2), ("text", "text"), emb)
    swapped = bank.replace(2, torch.tensor([3.0, 0, 0, 0]))
    assert swapped.modalities == ("text", "visual")
    assert torch.equal(swapped.embeddings[1], torch.tensor([1.0, 0, 0, 0]))
    assert torch.equal(bank.embeddings, emb)
    extra = PromptBank("object", (5,), ("visual",), F.normalize(torch.randn(1, 4), dim=-1))
    assert bank.extend(extra).category_ids == (1, 2, 5)
    with pytest.raises(ValueError):
        bank.extend(PromptBank("interaction", (5,), ("visual",), extra.embeddings))


def test_union_and_crop():
    a = Box.from_corners(0.1, 0.2, 0.3, 0.4)
    b = Box.from_corners(0.25, 0.1, 0.6, 0.3)
    assert union_box(a, b).corners() == pytest.approx((0.1, 0.1, 0.6, 0.4))
    img = torch.arange(3 * 10 * 10, dtype=torch.float32).reshape(3, 10, 10)
    c = crop(img, Box.from_corners(0.2, 0.3, 0.5, 0.9))
    assert c.shape == (3, 6, 3)
    assert torch.equal(c, img[:, 3:9, 2:5])
    with pytest.raises(ValueError):
        crop(img, Box.from_corners(0.2, 0.2, 0.25, 0.5))


def test_visual_bank_averages_exemplars(provider):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    b1, b2 = Box.from_corners(0.1, 0.1, 0.4, 0.4), Box.from_corners(0.5, 0.5, 0.9, 0.9)
    spec = VisualPromptSpec(image, object_boxes=[(b1, 4), (b2, 4), (b2, 1)], pair_boxes=[(b1, b2, 7)])
    ob, ib = encode_visual_prompts(spec, provider)
    assert ob.category_ids == (1, 4) and ob.modalities == ("visual", "visual")
    img = torch.from_numpy(image).permute(2, 0, 1).float()[None] / 255
    e1 = provider.encode_image(img[:, :, 6:26, 6:26])
    e2 = provider.encode_image(img[:, :, 32:58, 32:58])
    assert torch.allclose(ob.embeddings[1], F.normalize(e1 + e2, dim=-1)[0], atol=1e-6)
    assert ib.category_ids == (7,)
    none_obj, none_int = encode_visual_prompts(VisualPromptSpec(image), provider)
    assert none_obj is None and none_int is None
    roundtrip = VisualPromptSpec.from_dict(spec.to_dict(), image)
    assert roundtrip.object_boxes[0][1] == 4


def test_classify_rows_are_distributions():
    proj = torch.nn.Linear(8, 4)
    q = torch.randn(2, 5, 8)
    bank = F.normalize(torch.randn(3, 4), dim=-1)
    p = classify(q, bank, proj, 0.07, background=torch.randn(4))
    assert p.shape == (2, 5, 4)
    assert torch.allclose(p.sum(-1), torch.ones(2, 5), atol=1e-6)
    per_image = bank.expand(2, -1, -1)
    assert torch.equal(bank_similarity(q, bank, proj), bank_similarity(q, per_image, proj))
