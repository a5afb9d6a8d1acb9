import random

import pytest
from hypothesis import given, strategies as st

from caveprobe.memspace import PAGE_SIZE, USER_TOP, AddressSpace
from caveprobe.probe import (
    Accessibility,
    NotWritableError,
    ProbeConfig,
    ProbeOutcome,
    Prober,
    RetryBudgetExhausted,
    Writability,
)
from helpers import make_space, random_permed_space


@pytest.fixture
def space():
    return make_space(
        (0x10000, PAGE_SIZE, "ru", b"read-only"),
        (0x11000, PAGE_SIZE, "rwu", b"writable"),
        (0x12000, PAGE_SIZE, "", b""),          # guard style
        (0x13000, PAGE_SIZE, "rw", b""),        # mapped, not user visible
        (USER_TOP, PAGE_SIZE, "rx", b""),       # kernel half
    )


def quiet_prober(**kw) -> Prober:
    kw.setdefault("spurious_abort_probability", 0.0)
    return Prober(ProbeConfig(**kw))


class TestConfig:
    def test_defaults(self):
        cfg = ProbeConfig()
        assert cfg.spurious_abort_probability == 0.001
        assert cfg.max_retries == 100

    def test_probability_range(self):
        with pytest.raises(ValueError):
            ProbeConfig(spurious_abort_probability=1.0)
        with pytest.raises(ValueError):
            ProbeConfig(spurious_abort_probability=-0.1)
        ProbeConfig(spurious_abort_probability=0.0)

    def test_retry_minimum(self):
        with pytest.raises(ValueError):
            ProbeConfig(max_retries=0)


class TestSingleTransactions:
    def test_read_commits_on_accessible(self, space):
        p = quiet_prober()
        assert p.transaction_read(space, 0x10000) is ProbeOutcome.COMMITTED

    def test_read_fatal_on_unmapped(self, space):
        p = quiet_prober()
        assert p.transaction_read(space, 0x999000) is ProbeOutcome.FATAL_ABORT

    def test_read_fatal_on_guard(self, space):
        p = quiet_prober()
        assert p.transaction_read(space, 0x12000) is ProbeOutcome.FATAL_ABORT

    def test_read_fatal_on_supervisor_page(self, space):
        p = quiet_prober()
        assert p.transaction_read(space, 0x13000) is ProbeOutcome.FATAL_ABORT

    def test_read_fatal_on_kernel_half(self, space):
        p = quiet_prober()
        assert p.transaction_read(space, USER_TOP) is ProbeOutcome.FATAL_ABORT

    def test_write_explicit_abort_on_writable(self, space):
        p = quiet_prober()
        out = p.transaction_write_abort(space, 0x11000)
        assert out is ProbeOutcome.EXPLICIT_ABORT

    def test_write_fatal_on_read_only(self, space):
        p = quiet_prober()
        assert p.transaction_write_abort(space, 0x10000) is ProbeOutcome.FATAL_ABORT

    def test_write_never_modifies(self, space):
        p = quiet_prober()
        before = space.content_hash()
        p.transaction_write_abort(space, 0x11000)
        p.transaction_write_abort(space, 0x10000)
        assert space.content_hash() == before

    def test_counters(self, space):
        p = quiet_prober()
        p.transaction_read(space, 0x10000)
        p.transaction_write_abort(space, 0x11000)
        assert p.counters["read_tx"] == 1
        assert p.counters["write_tx"] == 1


class TestTap:
    def test_accessible(self, space):
        assert quiet_prober().tap(space, 0x10123) is Accessibility.ACCESSIBLE

    def test_inaccessible_variants(self, space):
        p = quiet_prober()
        for addr in (0x999000, 0x12000, 0x13000, USER_TOP, USER_TOP + 0x5000):
            assert p.tap(space, addr) is Accessibility.INACCESSIBLE

    def test_zero_probability_never_retries(self, space):
        p = quiet_prober()
        for _ in range(50):
            p.tap(space, 0x10000)
        assert p.counters["retries"] == 0
        assert p.counters["read_tx"] == 50

    def test_retry_sequence_frozen_seed(self, space):
        # with seed 99 at probability 0.5 the first four draws are below
        # 0.5 and the fifth is 0.7599, so the fifth attempt commits
        p = Prober(ProbeConfig(spurious_abort_probability=0.5, rng_seed=99,
                               max_retries=4))
        assert p.tap(space, 0x10000) is Accessibility.ACCESSIBLE
        assert p.counters["read_tx"] == 5
        assert p.counters["retries"] == 4

    def test_retry_budget_exhaustion_frozen_seed(self, space):
        # same draw sequence, one less retry allowed: the budget runs out
        p = Prober(ProbeConfig(spurious_abort_probability=0.5, rng_seed=99,
                               max_retries=3))
        with pytest.raises(RetryBudgetExhausted) as exc:
            p.tap(space, 0x10000)
        assert exc.value.attempts == 4
        assert exc.value.addr == 0x10000

    def test_exhaustion_never_misclassifies(self, space):
        # seed 0 at probability 0.9: the first five draws all fall below
        # 0.9, so a 4-retry budget is spent without an answer
        p = Prober(ProbeConfig(spurious_abort_probability=0.9, rng_seed=0,
                               max_retries=4))
        with pytest.raises(RetryBudgetExhausted) as exc:
            p.tap(space, 0x11000)
        assert exc.value.attempts == 5

    def test_spurious_aborts_eventually_resolve(self, space):
        p = Prober(ProbeConfig(spurious_abort_probability=0.3, rng_seed=7,
                               max_retries=100))
        for _ in range(200):
            assert p.tap(space, 0x11000) is Accessibility.ACCESSIBLE
        assert p.counters["retries"] > 0


class TestClaw:
    def test_writable(self, space):
        assert quiet_prober().claw(space, 0x11010) is Writability.WRITABLE

    def test_read_only(self, space):
        assert quiet_prober().claw(space, 0x10000) is Writability.READ_ONLY

    def test_inaccessible_short_circuits(self, space):
        p = quiet_prober()
        assert p.claw(space, 0x999000) is Writability.INACCESSIBLE
        assert p.counters["write_tx"] == 0
        assert p.counters["read_tx"] == 1

    def test_never_modifies_memory(self, space):
        p = quiet_prober()
        before = space.content_hash()
        for addr in (0x10000, 0x11000, 0x12000, 0x999000):
            p.claw(space, addr)
        assert space.content_hash() == before

    def test_retry_in_write_phase(self, space):
        p = Prober(ProbeConfig(spurious_abort_probability=0.3, rng_seed=11,
                               max_retries=100))
        for _ in range(100):
            assert p.claw(space, 0x11000) is Writability.WRITABLE


class TestSafeWrite:
    def test_writes_after_probing(self, space):
        p = quiet_prober()
        p.safe_write(space, 0x11100, b"hello")
        assert space.read_bytes(0x11100, 5) == b"hello"
        assert p.counters["safe_writes"] == 1
        assert p.counters["claws"] == 1

    def test_cross_page_probes_every_page(self):
        space = make_space((0x20000, 2 * PAGE_SIZE, "rwu", b""))
        p = quiet_prober()
        p.safe_write(space, 0x20FF8, b"A" * 16)
        assert p.counters["claws"] == 2
        assert space.read_bytes(0x20FF8, 16) == b"A" * 16

    def test_refuses_read_only_and_writes_nothing(self, space):
        p = quiet_prober()
        before = space.content_hash()
        with pytest.raises(NotWritableError) as exc:
            p.safe_write(space, 0x10FF0, b"B" * 32)
        assert exc.value.page_base == 0x10000
        assert space.content_hash() == before

    def test_partial_refusal_writes_nothing(self):
        space = make_space(
            (0x20000, PAGE_SIZE, "rwu", b""),
            (0x21000, PAGE_SIZE, "ru", b""),
        )
        p = quiet_prober()
        before = space.content_hash()
        with pytest.raises(NotWritableError) as exc:
            p.safe_write(space, 0x20FF8, b"C" * 16)
        assert exc.value.page_base == 0x21000
        assert space.content_hash() == before

    def test_rejects_empty_payload(self, space):
        with pytest.raises(ValueError):
            quiet_prober().safe_write(space, 0x11000, b"")


class TestTrace:
    def test_trace_records_primitives(self, space):
        p = Prober(ProbeConfig(spurious_abort_probability=0.0), trace=True)
        p.tap(space, 0x10000)
        p.claw(space, 0x11000)
        ops = [op for op, _, _ in p.trace_log]
        assert "read_tx" in ops and "write_tx" in ops
        assert "tap" in ops and "claw" in ops

    def test_no_trace_by_default(self, space):
        p = quiet_prober()
        p.tap(space, 0x10000)
        assert p.trace_log is None


@given(seed=st.integers(0, 2**32 - 1), addr_seed=st.integers(0, 2**32 - 1))
def test_probes_never_fault_or_mutate(seed, addr_seed):
    rng = random.Random(seed)
    space, _, start, end = random_permed_space(rng, max_pages=24)
    p = Prober(ProbeConfig(spurious_abort_probability=0.001, rng_seed=seed))
    before = space.content_hash()
    arng = random.Random(addr_seed)
    for _ in range(32):
        addr = arng.randrange(0, 1 << 48)
        if arng.random() < 0.5:
            addr = arng.randrange(start, max(end, start + 1))
        p.tap(space, addr)
        p.claw(space, addr)
    assert space.content_hash() == before
