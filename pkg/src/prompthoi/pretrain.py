"""Contrastive pre-training of the toy dual encoder and the alpha warm start."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .data import HOIDataset
from .encoders import AdaptorAlpha, ToyDualEncoder, TextVocabulary, resize_for_embedding, to_float_images
from .label_space import UnifiedLabelSpace
from .prompts import crop, union_box
from .synth.prompts import PhrasePools
from .text import interaction_sentence, object_sentence, tokenize, verb_ing

log = logging.getLogger(__name__)


def toy_vocabulary(space: UnifiedLabelSpace, pools: PhrasePools = PhrasePools()) -> list[str]:
    words = set(tokenize("a an the photo of person"))
    for obj in space.objects:
        words.update(tokenize(object_sentence(obj)))
    for a in space.actions:
        words.update(tokenize(verb_ing(a)))
    for phrases in pools.to_dict().values():
        for p in phrases:
            words.update(tokenize(p))
    return sorted(words)


def _category_sentences(space: UnifiedLabelSpace):
    objs = [object_sentence(o) for o in space.objects]
    inters = [interaction_sentence(*space.hoi_terms(h)) for h in range(len(space.hois))]
    return objs, inters


def _crop_tables(dataset: HOIDataset):
    """32x32 object crops and union crops with their category ids."""
    space = dataset.label_space
    obj_x, obj_y, int_x, int_y = [], [], [], []
    for s in dataset.samples:
        img = to_float_images(s.image)[0]
        for t in s.annotations:
            obj_x.append(resize_for_embedding(crop(img, t.object)[None])[0])
            obj_y.append(t.object_class)
            int_x.append(resize_for_embedding(crop(img, union_box(t.human, t.object))[None])[0])
            int_y.append(space.hoi_id(t.verb_class, t.object_class))
    return torch.stack(obj_x), torch.tensor(obj_y), torch.stack(int_x), torch.tensor(int_y)


def pretrain_dual_encoder(
    dataset: HOIDataset,
    dim: int = 64,
    steps: int = 400,
    batch: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    pools: PhrasePools = PhrasePools(),
) -> ToyDualEncoder:
    """Scene/prompt in-batch InfoNCE, plus crop/template classification against every category sentence."""
    space = dataset.label_space
    enc = ToyDualEncoder(TextVocabulary(toy_vocabulary(space, pools)), dim, seed)
    scenes = resize_for_embedding(to_float_images([s.image for s in dataset.samples]))
    prompts = [s.prompt or "" for s in dataset.samples]
    obj_x, obj_y, int_x, int_y = _crop_tables(dataset)
    obj_sent, int_sent = _category_sentences(space)
    log_scale = torch.nn.Parameter(torch.tensor(np.log(1 / 0.07), dtype=torch.float32))
    opt = torch.optim.Adam(list(enc.parameters()) + [log_scale], lr=lr)
    g = torch.Generator().manual_seed(seed)
    for step in range(steps):
        scale = log_scale.exp().clamp(max=100)
        si = torch.randint(len(scenes), (batch,), generator=g)
        img = enc.image_features(scenes[si])
        txt = enc.text_features([prompts[i] for i in si.tolist()])
        sim = scale * img @ txt.T
        labels = torch.arange(batch)
        # identical prompts in one batch are both positives; keep the first as the target
        loss = (F.cross_entropy(sim, labels) + F.cross_entropy(sim.T, labels)) / 2
        oi = torch.randint(len(obj_x), (batch,), generator=g)
        ii = torch.randint(len(int_x), (batch,), generator=g)
        loss = loss + F.cross_entropy(scale * enc.image_features(obj_x[oi]) @ enc.text_features(obj_sent).T, obj_y[oi])
        loss = loss + F.cross_entropy(scale * enc.image_features(int_x[ii]) @ enc.text_features(int_sent).T, int_y[ii])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.debug("dual encoder step %d loss %.4f", step, loss.item())
    enc.zero_grad(set_to_none=True)
    enc.ready = True
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc


def warm_start_alpha(alpha: AdaptorAlpha, provider, dataset: HOIDataset, steps: int = 300, lr: float = 3e-3,
                     seed: int = 0) -> float:
    """Fit alpha so that alpha(image embedding) points at the paired prompt's text embedding.

    Returns the final mean cosine. Runs before detector training and outside its loss.
    """
    with torch.no_grad():
        img = provider.encode_image([s.image for s in dataset.samples])
        txt = provider.encode_text([s.prompt or "" for s in dataset.samples])
    opt = torch.optim.Adam(alpha.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    cos = torch.zeros(())
    for _ in range(steps):
        idx = torch.randint(len(img), (min(128, len(img)),), generator=g)
        cos = (alpha(img[idx]) * txt[idx]).sum(-1).mean()
        opt.zero_grad()
        (1 - cos).backward()
        opt.step()
    return cos.item()


def consistency_scorer(provider):
    """Stand-in image/prompt agreement: (cosine + 1) / 2 in [0, 1]."""

    def score(sample) -> float:
        with torch.no_grad():
            img = provider.encode_image(sample.image)
            txt = provider.encode_text([sample.prompt if isinstance(sample.prompt, str) else sample.prompt.sentence])
        return float(min(1.0, max(0.0, (float((img * txt).sum()) + 1) / 2)))

    return score
