import numpy as np

from mnm.baselines import SlotTable, salu_read, salu_write
from mnm.autodiff import Tensor


def pair(rng, d_k=4, d_v=3, batch=1):
    return (Tensor(rng.uniform(-1, 1, (batch, d_k))),
            Tensor(rng.uniform(-1, 1, (batch, d_v))))


def test_write_appends_single_pair():
    rng = np.random.default_rng(0)
    table = SlotTable()
    k, v = pair(rng)
    table = salu_write(table, [k], [v])
    assert len(table) == 1


def test_write_grows_unboundedly():
    rng = np.random.default_rng(1)
    table = SlotTable()
    for t in range(17):
        k, v = pair(rng)
        table = salu_write(table, [k], [v])
        assert len(table) == t + 1


def test_written_values_retrievable_by_index():
    rng = np.random.default_rng(2)
    table = SlotTable()
    pairs = [pair(rng) for _ in range(5)]
    for k, v in pairs:
        table = salu_write(table, [k], [v])
    for j, (k, v) in enumerate(pairs):
        assert np.array_equal(table.keys[j].data, k.data)
        assert np.array_equal(table.values[j].data, v.data)


def test_empty_table_reads_zero():
    rng = np.random.default_rng(3)
    k, _ = pair(rng)
    out = salu_read(SlotTable(), [k], value_dim=3)
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_single_slot_reads_stored_value_exactly():
    rng = np.random.default_rng(4)
    table = SlotTable()
    k, v = pair(rng)
    table = salu_write(table, [k], [v])
    out = salu_read(table, [k], value_dim=3)
    assert np.allclose(out.data, v.data)


def test_identical_keys_average_values():
    rng = np.random.default_rng(5)
    table = SlotTable()
    k, v1 = pair(rng)
    _, v2 = pair(rng)
    table = salu_write(table, [k], [v1])
    table = salu_write(table, [k], [v2])
    out = salu_read(table, [k], value_dim=3)
    assert np.allclose(out.data, 0.5 * (v1.data + v2.data))


def test_read_is_convex_combination_of_values():
    rng = np.random.default_rng(6)
    for _ in range(50):
        table = SlotTable()
        n = rng.integers(1, 9)
        for _ in range(n):
            k, v = pair(rng)
            table = salu_write(table, [k], [v])
        q, _ = pair(rng)
        out = salu_read(table, [q], value_dim=3).data
        stacked = np.stack([v.data[0] for v in table.values])
        lo = stacked.min(axis=0) - 1e-12
        hi = stacked.max(axis=0) + 1e-12
        assert np.all(out[0] >= lo) and np.all(out[0] <= hi)


def test_scalar_count_grows_linearly():
    rng = np.random.default_rng(7)
    table = SlotTable()
    for t in range(1, 6):
        k, v = pair(rng)
        table = salu_write(table, [k], [v])
        assert table.scalar_count() == t * (4 + 3)
