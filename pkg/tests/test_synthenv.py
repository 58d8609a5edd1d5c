import itertools

import numpy as np
import pytest

from ltu import synthenv as se
from ltu.corpus import Vocab, encode_ct


def test_bin_counts(ppc_spec, seo_spec):
    assert [t.n_bins for t in ppc_spec.tasks] == [3, 3]
    assert [t.n_bins for t in seo_spec.tasks] == [10, 10]
    assert ppc_spec.vocab_tasks() == {"ppc_ctr": 3, "ppc_cpc": 3}


@pytest.mark.parametrize("rho", [0.0, 0.4, 1.0])
def test_shared_direction_overlap(rho):
    seo = se.make_domain("seo", rho=rho, tau=1.0, lexicon_size=4)
    ppc = se.make_domain("ppc", rho=rho, tau=1.0, lexicon_size=4)
    ws = np.array(seo.tasks[0].state_weights)
    wp = np.array(ppc.tasks[0].state_weights)
    shared = np.flatnonzero((ws != 0) & (wp != 0))
    assert len(shared) == round(rho * 5)
    if rho == 0:
        assert ws @ wp == 0
        assert np.all(ws * wp == 0)
    else:
        # shared directions carry identical weights
        assert np.array_equal(ws[shared], wp[shared])


def test_tau_zero_is_deterministic():
    spec = se.make_domain("ppc", tau=0.0, lexicon_size=4)
    rng = np.random.default_rng(0)
    cat = spec.categories[0]
    x = se._draw_levels(np.asarray(cat.level_probs), rng) - 1.0
    y = se._draw_levels(np.asarray(cat.action_probs), rng) - 1.0
    p = spec.label_probs("ctr", x[None], y[None], np.array([cat.offset], float))[0]
    assert sorted(p.tolist()) == [0.0, 0.0, 1.0]
    labels = set()
    for seed in range(50):
        t = se.sample_trajectory(spec, cat.name, np.random.default_rng(seed))
        labels.add((tuple(se.parse_state(spec, t.steps[0].state)),
                    tuple(se.parse_action(spec, t.steps[0].action)), t.final_reward))
    by_pair = {}
    for xs, ys, lab in labels:
        by_pair.setdefault((xs, ys), set()).add(lab)
    assert all(len(v) == 1 for v in by_pair.values())


def test_argmax_equals_edges_below():
    spec = se.make_domain("seo", tau=0.7, lexicon_size=4)
    rng = np.random.default_rng(1)
    xs, ys, offs = se._draw_features(spec, spec.category_names, 2000, rng)
    t = spec.tasks[0]
    p = spec.label_probs(t, xs, ys, offs)
    score = spec.scores(t, xs, ys, offs)
    np.testing.assert_array_equal(p.argmax(1), np.searchsorted(t.edges, score))
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", ["seo", "ppc"])
def test_default_spec_covers_all_bins(kind):
    spec = se.make_domain(kind)
    trajs = se.sample_dataset(spec, spec.category_names, 10000, np.random.default_rng(2))
    for t in spec.tasks:
        labels = {tr.final_reward for tr in trajs if tr.task == spec.task_key(t.name)}
        assert labels == set(range(t.n_bins))


def test_feature_recovery(seo_spec):
    rng = np.random.default_rng(3)
    for cat in seo_spec.category_names:
        c = seo_spec.category(cat)
        x = se._draw_levels(np.asarray(c.level_probs), rng) - 1.0
        y = se._draw_levels(np.asarray(c.action_probs), rng) - 1.0
        assert np.array_equal(se.parse_state(seo_spec, se.render_state(seo_spec, cat, x, rng)), x)
        assert np.array_equal(se.parse_action(seo_spec, se.render_action(seo_spec, cat, y, rng)), y)


def test_unknown_category(ppc_spec):
    with pytest.raises(se.UnknownCategoryError):
        se.sample_trajectory(ppc_spec, "nope", np.random.default_rng(0))


def test_bayes_deterministic_and_uniform_limits():
    det = se.make_domain("ppc", tau=0.0, lexicon_size=4)
    acc, err = se.bayes_accuracy(det, "ctr", det.category_names, 500, np.random.default_rng(0))
    assert acc == 1.0 and err == 0.0
    hot = se.make_domain("seo", tau=1e9, lexicon_size=4)
    acc, err = se.bayes_accuracy(hot, "ctr", hot.category_names, 5000, np.random.default_rng(0))
    assert abs(acc - 0.1) < 1e-6


def test_bayes_matches_brute_force_enumeration(seo_spec):
    # enumerate every (category, x, y) cell with its probability and take the exact expectation
    t = seo_spec.tasks[0]
    cats = seo_spec.category_names
    d_s, d_a = seo_spec.n_features, seo_spec.n_action_features
    exact = 0.0
    for name in cats:
        c = seo_spec.category(name)
        lp, ap = np.asarray(c.level_probs), np.asarray(c.action_probs)
        active = sorted({i for i, w in enumerate(t.state_weights) if w} | {i for i, _ in seo_spec.cross_pairs})
        for xv in itertools.product([-1.0, 0.0, 1.0], repeat=len(active)):
            px = np.prod([lp[i, int(v) + 1] for i, v in zip(active, xv)])
            x = np.zeros(d_s)
            x[active] = xv
            ys = np.array(list(itertools.product([-1.0, 0.0, 1.0], repeat=d_a)))
            py = np.prod(ap[np.arange(d_a), (ys + 1).astype(int)], axis=1)
            best = seo_spec.label_probs(t, np.repeat(x[None], len(ys), 0), ys,
                                        np.full(len(ys), float(c.offset))).max(1)
            exact += px * float(py @ best) / len(cats)
    mc, err = se.bayes_accuracy(seo_spec, "ctr", cats, 50000, np.random.default_rng(4))
    assert abs(mc - exact) < 4 * err
    assert abs(exact - 0.35) < 0.03


def test_calibrated_targets():
    for kind, target in (("ppc", 0.7), ("seo", 0.35)):
        spec = se.make_domain(kind)
        for t in spec.tasks:
            acc, _ = se.bayes_accuracy(spec, t.name, spec.category_names, 20000, np.random.default_rng(5))
            assert abs(acc - target) < 0.02


def test_split():
    spec = se.make_domain("seo", tau=1.0, lexicon_size=4)
    s = se.split_categories(spec, 2, seed=7)
    assert len(s.train) == 8 and len(s.heldout) == 2
    assert not set(s.train) & set(s.heldout)
    assert set(s.train) | set(s.heldout) == set(spec.category_names)
    assert se.split_categories(spec, 2, seed=7) == s
    with pytest.raises(ValueError):
        se.split_categories(spec, 10, seed=7)
    with pytest.raises(ValueError):
        se.CategorySplit(train=["a"], heldout=["a"])


def test_determinism_and_json(tmp_path, ppc_spec):
    a = se.sample_dataset(ppc_spec, ppc_spec.category_names, 50, np.random.default_rng(9), n_steps=3)
    b = se.sample_dataset(ppc_spec, ppc_spec.category_names, 50, np.random.default_rng(9), n_steps=3)
    assert a == b
    ppc_spec.save(tmp_path / "d.json")
    assert se.DomainSpec.load(tmp_path / "d.json") == ppc_spec
    assert se.make_domain("ppc", seed=0, lexicon_size=6, n_categories=5, n_calibration=4000) == ppc_spec


def test_dataset_respects_exclusion(ppc_spec):
    rng = np.random.default_rng(10)
    first = se.sample_dataset(ppc_spec, ppc_spec.category_names, 100, rng)
    hashes = {t.content_hash() for t in first}
    assert len(hashes) == 100
    second = se.sample_dataset(ppc_spec, ppc_spec.category_names, 100, rng, exclude=hashes)
    assert not hashes & {t.content_hash() for t in second}


def test_default_sizes_fit_the_encoder():
    spec = se.make_domain("seo")
    vocab = Vocab.build(spec.words(), spec.vocab_tasks())
    trajs = se.sample_dataset(spec, spec.category_names, 300, np.random.default_rng(11))
    lengths = [len(t.steps[0].state.split()) for t in trajs]
    assert 10 <= min(lengths) and max(lengths) <= 30
    alens = [len(t.steps[0].action.split()) for t in trajs]
    assert 3 <= min(alens) and max(alens) <= 8
    assert max(len(encode_ct(t, vocab)) for t in trajs) <= 64


def test_common_docs_have_no_markers():
    docs = se.sample_common_docs(20, np.random.default_rng(0))
    vocab = Vocab.build(se.common_words(), {})
    for d in docs:
        assert vocab.unk_id not in vocab.encode_words(d)
        assert "<" not in d
