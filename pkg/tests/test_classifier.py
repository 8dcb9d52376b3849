import math
import random
from types import SimpleNamespace

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from ctxface.attention import ContextAttention
from ctxface.classifier import (
    ContextTail,
    FrameBank,
    LossWeights,
    Sample,
    classify,
    context_swap_augment,
    init_head,
    joint_loss,
    majority_vote,
    make_head,
    predict_frames,
    shifted_latent,
    train_can_and_head,
)
from ctxface.errors import ConfigurationError, DimensionError
from ctxface.latent import GaussianLatent

from gradcheck import fd_relative_error


class TestClassify:
    def test_bias_dominance(self):
        head = make_head(4, 7)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.copy_(torch.tensor([1.0, 0, 0, 0, 0, 0, 0]))
        for s in range(5):
            logits = classify(torch.randn(4, generator=torch.Generator().manual_seed(s)), head)
            assert logits.shape == (7,) and logits.argmax().item() == 0

    def test_matrix_vector_oracle(self):
        head = make_head(4, 3, seed=2).double()
        m = torch.randn(4, dtype=torch.float64)
        got = classify(m, head)
        for c in range(3):
            expect = sum(head.weight[c, j].item() * m[j].item() for j in range(4)) + head.bias[c].item()
            assert got[c].item() == pytest.approx(expect, rel=1e-12)

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            classify(torch.zeros(5), make_head(4, 3))

    def test_argmax_shift_invariant(self):
        logits = classify(torch.randn(4), make_head(4, 5, 1))
        assert logits.argmax() == (logits + 3.7).argmax()

    def test_head_needs_two_classes(self):
        with pytest.raises(ValueError):
            make_head(4, 1)


def _pair(d=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (
        GaussianLatent(torch.randn(d, generator=g, dtype=torch.float64), torch.randn(d, generator=g, dtype=torch.float64)),
        GaussianLatent(torch.randn(d, generator=g, dtype=torch.float64), torch.randn(d, generator=g, dtype=torch.float64)),
    )


class TestJointLoss:
    def test_alpha_zero_is_cross_entropy(self):
        face, shifted = _pair()
        logits = torch.randn(7, dtype=torch.float64)
        ce = torch.nn.functional.cross_entropy(logits[None], torch.tensor([2]))
        assert torch.equal(joint_loss(logits, torch.tensor(2), face, shifted, LossWeights(0.0)), ce)

    def test_identical_latents_add_nothing(self):
        face, _ = _pair()
        logits = torch.randn(7, dtype=torch.float64)
        ce = torch.nn.functional.cross_entropy(logits[None], torch.tensor([4]))
        got = joint_loss(logits, torch.tensor(4), face, face, LossWeights(3.0))
        assert got.item() == ce.item()

    def test_uniform_logits_ln7(self):
        face, shifted = _pair()
        got = joint_loss(torch.zeros(7), torch.tensor(3), face, face, LossWeights(1e-5))
        assert got.item() == pytest.approx(math.log(7), abs=1e-6)
        assert math.log(7) == pytest.approx(1.9459, abs=1e-4)

    def test_kl_term_weighted(self):
        face, shifted = _pair()
        base = joint_loss(torch.zeros(7, dtype=torch.float64), torch.tensor(0), face, shifted, LossWeights(0.0))
        w = joint_loss(torch.zeros(7, dtype=torch.float64), torch.tensor(0), face, shifted, LossWeights(0.5))
        from ctxface.latent import kl_between

        assert (w - base).item() == pytest.approx(0.5 * kl_between(face, shifted).item(), rel=1e-12)

    @pytest.mark.parametrize("label", [-1, 7])
    def test_invalid_label(self, label):
        face, _ = _pair()
        with pytest.raises(ValueError):
            joint_loss(torch.zeros(7), torch.tensor(label), face, face, LossWeights())

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0)

    @given(st.integers(0, 1000), st.floats(0, 10))
    def test_nonnegative(self, seed, alpha):
        face, shifted = _pair(4, seed)
        logits = torch.randn(3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        assert joint_loss(logits, torch.tensor(seed % 3), face, shifted, LossWeights(alpha)).item() >= 0

    def test_head_gradient_fd(self):
        head = make_head(4, 3, 0).double()
        face, shifted = _pair(4, 9)
        w = LossWeights(1e-5)

        def fn():
            return joint_loss(classify(shifted.mean, head), torch.tensor(1), face, shifted, w)

        assert fd_relative_error(fn, head.weight) <= 1e-3
        assert fd_relative_error(fn, head.bias) <= 1e-3

    def test_shifted_gradient_fd(self):
        head = make_head(4, 3, 0).double()
        face, shifted = _pair(4, 10)
        shifted.mean.requires_grad_(True)
        shifted.log_variance.requires_grad_(True)
        w = LossWeights(0.3)

        def fn():
            return joint_loss(classify(shifted.mean, head), torch.tensor(2), face, shifted, w)

        assert fd_relative_error(fn, shifted.mean) <= 1e-3
        assert fd_relative_error(fn, shifted.log_variance) <= 1e-3


class TestInitHead:
    def test_separable_toy_reaches_full_accuracy(self):
        g = torch.Generator().manual_seed(0)
        means = torch.cat([torch.randn(40, 6, generator=g) * 0.3 + 2, torch.randn(40, 6, generator=g) * 0.3 - 2])
        labels = torch.tensor([0] * 40 + [1] * 40)
        head = init_head(means, labels, 2, 50, lr=1e-2, batch_size=16)
        assert (head(means).argmax(-1) == labels).all()

    def test_zero_epochs_is_noop(self):
        start = make_head(3, 2, 5)
        snap = {k: v.clone() for k, v in start.state_dict().items()}
        head = init_head(torch.randn(4, 3), torch.tensor([0, 1, 0, 1]), 2, 0, head=start)
        for k, v in head.state_dict().items():
            assert torch.equal(v, snap[k])
        fresh = init_head(torch.randn(4, 3), torch.tensor([0, 1, 0, 1]), 2, 0, seed=5)
        for k, v in fresh.state_dict().items():
            assert torch.equal(v, snap[k])

    def test_constant_labels(self):
        means = torch.randn(30, 4, generator=torch.Generator().manual_seed(1))
        head = init_head(means, torch.full((30,), 2), 4, 300, lr=1e-2)
        probe = torch.randn(50, 4, generator=torch.Generator().manual_seed(2))
        assert (head(probe).argmax(-1) == 2).all()

    def test_empty(self):
        with pytest.raises(ValueError):
            init_head(torch.zeros(0, 4), torch.zeros(0), 2, 3)


def _samples(groups):
    """``groups`` maps (identity, label) to group size."""
    out = []
    for (ident, label), n in groups.items():
        for j in range(n):
            out.append(Sample(f"f-{ident}-{label}-{j}", f"c-{ident}-{label}-{j}", ident, label))
    return out


class TestContextSwap:
    def test_singletons_unchanged(self):
        batch = _samples({(i, c): 1 for i in range(3) for c in range(4)})
        for seed in range(20):
            assert context_swap_augment(batch, seed) == batch

    def test_postconditions(self):
        batch = _samples({(0, 0): 3, (0, 1): 2, (1, 0): 4, (2, 2): 1})
        owner = {s.context: (s.identity, s.label) for s in batch}
        for seed in range(50):
            out = context_swap_augment(batch, seed)
            assert [(s.face, s.identity, s.label) for s in out] == [(s.face, s.identity, s.label) for s in batch]
            for s in out:
                assert owner[s.context] == (s.identity, s.label)

    def test_coverage_over_seeds(self):
        batch = _samples({(0, 0): 3})
        seen = set()
        for seed in range(200):
            seen |= {s.context for s in context_swap_augment(batch, seed) if s.context != s.face.replace("f-", "c-")}
        assert seen == {s.context for s in batch}

    def test_swap_rate(self):
        batch = _samples({(0, 0): 2}) * 1
        n = sum(
            s.context != s.face.replace("f-", "c-")
            for seed in range(2000)
            for s in context_swap_augment(batch, seed)
        )
        assert abs(n / 4000 - 0.5) < 0.04

    def test_pool_partners(self):
        pool = _samples({(0, 0): 4})
        out = context_swap_augment(pool[:1], 3, pool=pool, p=1.0)
        assert out[0].context != pool[0].context and out[0].context in {s.context for s in pool}

    @given(st.integers(0, 10_000))
    def test_preserves_faces_and_labels(self, seed):
        rng = random.Random(seed)
        batch = _samples({(rng.randrange(3), rng.randrange(3)): rng.randrange(1, 4) for _ in range(5)})
        out = context_swap_augment(batch, seed)
        assert sorted((s.face, s.label) for s in out) == sorted((s.face, s.label) for s in batch)


class TestMajorityVote:
    def test_strict_majority(self):
        assert majority_vote([(1, [0.1, 0.8, 0.1]), (1, [0.2, 0.7, 0.1]), (2, [0.1, 0.1, 0.8])]) == 1

    def test_unanimous(self):
        assert majority_vote([(4, [0.0] * 4 + [1.0])] * 16) == 4

    def test_tie_by_mean_probability(self):
        happy, sad = 0, 1
        frames = [(happy, [0.6, 0.4])] * 8 + [(sad, [0.3, 0.7])] * 8
        # mean prob happy: (8*0.6 + 8*0.3)/16 = 0.45; sad: 0.55
        assert majority_vote(frames) == sad

    def test_empty(self):
        with pytest.raises(ValueError):
            majority_vote([])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=16), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, classes, rnd):
        frames = [(c, [0.1 + 0.01 * i if j == c else 0.05 for j in range(4)]) for i, c in enumerate(classes)]
        shuffled = frames[:]
        rnd.shuffle(shuffled)
        assert majority_vote(frames) == majority_vote(shuffled)


# ---------------------------------------------------------------- joint training on a toy bank

D, H, C = 6, 8, 4


def _toy_bank(n_ids=6, clips=8, frames=3, seed=0):
    """Face latents carry a weak class cue; context trunks carry a strong one."""
    g = torch.Generator().manual_seed(seed)
    face_dir = torch.randn(C, D, generator=g)
    ctx_dir = torch.randn(C, H, generator=g) * 2
    rows = {k: [] for k in ("fm", "fl", "ct", "y", "id", "clip")}
    clip = 0
    for i in range(n_ids):
        for j in range(clips):
            c = j % C
            for _ in range(frames):
                rows["fm"].append(0.3 * face_dir[c] + torch.randn(D, generator=g))
                rows["fl"].append(-1 + 0.1 * torch.randn(D, generator=g))
                rows["ct"].append(ctx_dir[c] + 0.5 * torch.randn(H, generator=g))
                rows["y"].append(c)
                rows["id"].append(i)
                rows["clip"].append(clip)
            clip += 1
    t = lambda k: torch.stack(rows[k])  # noqa: E731
    return FrameBank(t("fm"), t("fl"), t("ct"), torch.tensor(rows["y"]), torch.tensor(rows["id"]), torch.tensor(rows["clip"]))


def _toy_parts(seed=0):
    torch.manual_seed(seed)
    enc = SimpleNamespace(fc_hidden2=nn.Linear(H, H), head=nn.Linear(H, 2 * D))
    return ContextTail(enc), ContextAttention(D, generator=torch.Generator().manual_seed(seed)), make_head(D, C, seed)


def _idx(bank, ids):
    return torch.nonzero(torch.isin(bank.identity, torch.tensor(ids))).squeeze(1)


class TestTrainCanAndHead:
    def test_tail_from_frozen_encoder_is_trained(self):
        bank = _toy_bank()
        enc = SimpleNamespace(fc_hidden2=nn.Linear(H, H), head=nn.Linear(H, 2 * D))
        for p in (*enc.fc_hidden2.parameters(), *enc.head.parameters()):
            p.requires_grad_(False)
        tail = ContextTail(enc)
        assert all(p.requires_grad for p in tail.parameters())
        assert not any(p.requires_grad for p in enc.head.parameters())
        _, can, head = _toy_parts()
        res = train_can_and_head(bank, _idx(bank, [0, 1, 2]), tail, can, head, LossWeights(), 2, lr=1e-2)
        assert not torch.equal(res.tail.head.weight, enc.head.weight)

    def test_frozen_stream_untouched(self):
        bank = _toy_bank()
        tail, can, head = _toy_parts()
        stream = nn.Linear(3, 3)
        for p in stream.parameters():
            p.requires_grad_(False)
        snap = {k: v.clone() for k, v in stream.state_dict().items()}
        train_can_and_head(bank, _idx(bank, [0, 1, 2]), tail, can, head, LossWeights(), 2, lr=1e-2, face_stream=stream)
        for k, v in stream.state_dict().items():
            assert torch.equal(v, snap[k])

    def test_unfrozen_stream_rejected(self):
        bank = _toy_bank()
        with pytest.raises(ConfigurationError):
            train_can_and_head(bank, _idx(bank, [0]), *_toy_parts(), LossWeights(), 1, face_stream=nn.Linear(2, 2))

    def test_inputs_not_modified(self):
        bank = _toy_bank()
        tail, can, head = _toy_parts()
        snaps = [{k: v.clone() for k, v in m.state_dict().items()} for m in (tail, can, head)]
        train_can_and_head(bank, _idx(bank, [0, 1]), tail, can, head, LossWeights(), 2, lr=1e-2)
        for m, snap in zip((tail, can, head), snaps):
            for k, v in m.state_dict().items():
                assert torch.equal(v, snap[k])

    def test_face_face_leaves_tail(self):
        bank = _toy_bank()
        tail, can, head = _toy_parts()
        res = train_can_and_head(bank, _idx(bank, [0, 1]), tail, can, head, LossWeights(), 2, mode="face_face", lr=1e-2)
        for a, b in zip(res.tail.parameters(), tail.parameters()):
            assert torch.equal(a, b)

    def test_unknown_mode(self):
        bank = _toy_bank()
        with pytest.raises(ValueError):
            train_can_and_head(bank, _idx(bank, [0]), *_toy_parts(), LossWeights(), 1, mode="nope")

    def test_context_beats_head_alone(self):
        bank = _toy_bank()
        tail, can, _ = _toy_parts()
        tr, va = _idx(bank, [0, 1, 2, 3]), _idx(bank, [4, 5])
        head = init_head(bank.face_mean[tr], bank.labels[tr], C, 30, lr=1e-2, batch_size=16)
        from ctxface.classifier import clip_accuracy

        base = clip_accuracy(bank, va, predict_frames(bank, va, tail, can, head, "face_face", gamma=0.0))
        res = train_can_and_head(bank, tr, tail, can, head, LossWeights(), 30, lr=1e-2, val_idx=va, seed=1)
        got = clip_accuracy(bank, va, predict_frames(bank, va, res.tail, res.can, res.head, "face_context"))
        assert got >= base
        assert got >= 0.9

    def test_large_alpha_shrinks_offsets(self):
        bank = _toy_bank()
        tr = _idx(bank, [0, 1, 2, 3, 4, 5])
        norms = {}
        for alpha in (1e-5, 1e-1):
            res = train_can_and_head(bank, tr, *_toy_parts(), LossWeights(alpha), 20, lr=1e-2, seed=2)
            with torch.no_grad():
                _, out = shifted_latent(bank, tr, tr, res.tail, res.can, "face_context")
            norms[alpha] = out.offset_mean.norm(dim=-1).mean().item()
        assert norms[1e-1] < norms[1e-5]

    def test_history_and_best_epoch(self):
        bank = _toy_bank()
        res = train_can_and_head(bank, _idx(bank, [0, 1, 2]), *_toy_parts(), LossWeights(), 3, lr=1e-2, val_idx=_idx(bank, [4]))
        assert [r["epoch"] for r in res.history] == [1, 2, 3]
        assert all("val_acc" in r for r in res.history)

    def test_deterministic(self):
        bank = _toy_bank()
        runs = [
            train_can_and_head(bank, _idx(bank, [0, 1, 2]), *_toy_parts(), LossWeights(), 3, lr=1e-2, seed=4)
            for _ in range(2)
        ]
        for a, b in zip(runs[0].can.parameters(), runs[1].can.parameters()):
            assert torch.equal(a, b)
