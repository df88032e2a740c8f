import numpy as np
import pytest

from mnm import tasks


# ---------------------------------------------------------------------------
# dictionary inference
# ---------------------------------------------------------------------------

def parse_support(ep):
    """Recover the support pairs and query from a generated episode."""
    toks = list(ep.inputs)
    pairs = []
    i = 0
    while toks[i] != tasks.END_SUPPORT:
        src = []
        while toks[i] != tasks.EOS:
            src.append(toks[i])
            i += 1
        i += 1  # EOS
        tgt = []
        while toks[i] != tasks.PAIR_SEP:
            tgt.append(toks[i])
            i += 1
        i += 1  # PAIR_SEP
        pairs.append((src, tgt))
    i += 1  # END_SUPPORT
    query = []
    while toks[i] != tasks.EOS:
        query.append(toks[i])
        i += 1
    return pairs, query


def test_translate_matches_worked_example():
    # support abc->def, tla->qzd implies tca -> qfd
    mapping = {ord(c) - ord("a"): ord(t) - ord("a")
               for c, t in zip("abctl", "defqz")}
    seq = np.array([ord(c) - ord("a") for c in "tca"])
    out = tasks.translate(mapping, seq)
    assert "".join(chr(t + ord("a")) for t in out) == "qfd"


def test_dictionary_episode_consistent_mapping():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ep = tasks.gen_dictionary_inference(4, 3, rng)
        pairs, query = parse_support(ep)
        mapping = {}
        for src, tgt in pairs:
            for s, t in zip(src, tgt):
                assert mapping.setdefault(s, t) == t  # functional
        assert [mapping[q] for q in query] == list(ep.targets)


def test_dictionary_forced_coverage_k1_l1():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ep = tasks.gen_dictionary_inference(1, 1, rng)
        pairs, query = parse_support(ep)
        assert query == pairs[0][0]
        assert list(ep.targets) == pairs[0][1]


def test_dictionary_query_letters_always_in_support():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        ep = tasks.gen_dictionary_inference(3, 2, rng)
        pairs, query = parse_support(ep)
        seen = {s for src, _ in pairs for s in src}
        assert set(query) <= seen


def test_dictionary_mapping_is_bijection():
    rng = np.random.default_rng(3)
    for _ in range(200):
        ep = tasks.gen_dictionary_inference(13, 4, rng)
        pairs, _ = parse_support(ep)
        mapping = {s: t for src, tgt in pairs for s, t in zip(src, tgt)}
        assert len(set(mapping.values())) == len(mapping)
        assert all(s < tasks.N_SOURCE for s in mapping)
        assert all(tasks.N_SOURCE <= t < tasks.N_LETTERS
                   for t in mapping.values())


def test_dictionary_episode_length_formula():
    rng = np.random.default_rng(4)
    for k, l in [(1, 1), (4, 1), (8, 4), (16, 12)]:
        ep = tasks.gen_dictionary_inference(k, l, rng)
        assert ep.length == k * (2 * l + 2) + 2 * l + 2
        assert int(ep.target_mask.sum()) == l
        assert np.all(ep.inputs[ep.target_mask] == tasks.PLACEHOLDER)


def test_dictionary_rejects_bad_params():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        tasks.gen_dictionary_inference(0, 1, rng)
    with pytest.raises(ValueError):
        tasks.gen_dictionary_inference(1, 0, rng)


# ---------------------------------------------------------------------------
# double copy
# ---------------------------------------------------------------------------

def test_double_copy_repeats_sequence():
    rng = np.random.default_rng(6)
    ep = tasks.gen_double_copy(5, 10, rng)
    s = ep.inputs[:5]
    assert np.array_equal(ep.targets, np.concatenate([s, s]))
    assert ep.inputs[5] == tasks.COPY_EOS
    assert np.all(ep.inputs[6:] == tasks.COPY_PLACEHOLDER)


def test_double_copy_all_same_symbol():
    rng = np.random.default_rng(7)
    ep = tasks.gen_double_copy(2, 1, rng)  # alphabet of one symbol
    assert ep.targets.tolist() == [0, 0, 0, 0]


def test_double_copy_target_length():
    rng = np.random.default_rng(8)
    for length in (1, 7, 50):
        ep = tasks.gen_double_copy(length, 10, rng)
        assert len(ep.targets) == 2 * length
        assert ep.length == 3 * length + 1


def test_double_copy_token_distribution_uniform():
    rng = np.random.default_rng(9)
    counts = np.zeros(10)
    draws = 0
    while draws < 100_000:
        ep = tasks.gen_double_copy(50, 10, rng)
        sym = ep.inputs[:50]
        counts += np.bincount(sym, minlength=10)
        draws += 50
    expected = draws / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 9 degrees of freedom; 33.7 is far beyond the 0.9999 quantile
    assert chi2 < 33.7


# ---------------------------------------------------------------------------
# priority sort
# ---------------------------------------------------------------------------

def test_sort_presorted_input_is_prefix():
    rng = np.random.default_rng(10)
    ep = tasks.gen_priority_sort(6, 4, rng)
    order = np.argsort(-ep.inputs[:6, tasks.SORT_BITS])
    manual = ep.inputs[:6, :tasks.SORT_BITS][order[:4]]
    assert np.array_equal(ep.targets, manual)


def test_sort_matches_comparison_sort_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        ep = tasks.gen_priority_sort(20, 16, rng)
        items = [(float(ep.inputs[i, tasks.SORT_BITS]),
                  ep.inputs[i, :tasks.SORT_BITS]) for i in range(20)]
        items.sort(key=lambda kv: -kv[0])
        expected = np.stack([bits for _, bits in items[:16]])
        assert np.array_equal(ep.targets, expected)


def test_sort_full_list_when_m_equals_n():
    rng = np.random.default_rng(12)
    ep = tasks.gen_priority_sort(5, 5, rng)
    assert ep.targets.shape == (5, tasks.SORT_BITS)
    priorities = ep.inputs[:5, tasks.SORT_BITS]
    assert len(np.unique(priorities)) == 5


def test_sort_phase_marker_channel():
    rng = np.random.default_rng(13)
    ep = tasks.gen_priority_sort(4, 2, rng)
    assert np.all(ep.inputs[:4, tasks.SORT_BITS + 1] == 0.0)
    assert np.all(ep.inputs[4:, tasks.SORT_BITS + 1] == 1.0)
    assert np.array_equal(ep.target_mask, [False] * 4 + [True] * 2)


# ---------------------------------------------------------------------------
# generator determinism and serialization
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("gen", [
    lambda rng: tasks.gen_dictionary_inference(4, 2, rng),
    lambda rng: tasks.gen_double_copy(10, 10, rng),
    lambda rng: tasks.gen_priority_sort(8, 5, rng),
])
def test_generators_deterministic_given_seed(gen):
    a = gen(np.random.default_rng(99))
    b = gen(np.random.default_rng(99))
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.targets, b.targets)
    assert np.array_equal(a.target_mask, b.target_mask)


@pytest.mark.parametrize("gen", [
    lambda rng: tasks.gen_dictionary_inference(3, 2, rng),
    lambda rng: tasks.gen_double_copy(6, 10, rng),
    lambda rng: tasks.gen_priority_sort(5, 3, rng),
])
def test_episode_text_round_trip(gen):
    ep = gen(np.random.default_rng(100))
    back = tasks.episode_from_text(tasks.episode_to_text(ep))
    assert back.kind == ep.kind
    assert back.vocab_size == ep.vocab_size
    assert np.array_equal(back.inputs, ep.inputs)
    assert np.array_equal(back.targets, ep.targets)
    assert np.array_equal(back.target_mask, ep.target_mask)


def test_mask_count_must_match_targets():
    with pytest.raises(ValueError):
        tasks.TaskEpisode(kind="double_copy",
                          inputs=np.array([0, 1]),
                          targets=np.array([1]),
                          target_mask=np.array([False, False]),
                          vocab_size=12)
