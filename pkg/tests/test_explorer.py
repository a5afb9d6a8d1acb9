import random

import pytest

from caveprobe.explorer import (
    MapRun,
    PageEntry,
    PageMap,
    ReconstructedMap,
    SeedSet,
    egg_hunt,
    explore,
    explore_from_pointers,
    harvest_pointers,
    match_ground_truth,
    reconstruct_map,
    region_around,
    scan_linear,
    truth_runs,
)
from caveprobe.memspace import PAGE_SIZE, USER_TOP, parse_proc_maps
from caveprobe.probe import ProbeConfig, Prober, Writability
from helpers import make_space


def quiet_prober() -> Prober:
    return Prober(ProbeConfig(spurious_abort_probability=0.0))


def ptr_page(*values: int) -> bytes:
    """A page blob whose leading qwords are the given values."""
    return b"".join(v.to_bytes(8, "little") for v in values)


class TestTypes:
    def test_seed_set_rejects_empty(self):
        with pytest.raises(ValueError):
            SeedSet(())

    def test_page_entry_invariant(self):
        with pytest.raises(ValueError):
            PageEntry(accessible=False, writable=True)
        PageEntry(accessible=False, writable=None)

    def test_span(self):
        pm = PageMap({0x2000: PageEntry(True), 0x5000: PageEntry(True),
                      0x9000: PageEntry(False)})
        assert pm.span() == (0x2000, 0x6000)
        assert PageMap().span() is None


class TestScanLinear:
    def test_one_tap_per_page(self):
        space = make_space((0x10000, 4 * PAGE_SIZE, "ru", b""))
        p = quiet_prober()
        pm = scan_linear(space, p, 0x0E000, 0x16000)
        assert p.counters["taps"] == 8
        assert p.counters["read_tx"] == 8
        accessible = pm.accessible_pages()
        assert accessible == [0x10000, 0x11000, 0x12000, 0x13000]

    def test_alignment_checked(self):
        with pytest.raises(ValueError):
            scan_linear(make_space(), quiet_prober(), 0x100, 0x2000)


class TestHarvest:
    def test_extracts_user_half_pointers(self):
        page = ptr_page(0x404000, 0, USER_TOP, USER_TOP - 8, 1 << 63, 0x11)
        page += bytes(PAGE_SIZE - len(page))
        got = harvest_pointers(page)
        assert 0x404000 in got
        assert USER_TOP - 8 in got
        assert 0x11 in got
        assert 0 not in got
        assert USER_TOP not in got
        assert (1 << 63) not in got

    def test_requires_one_page(self):
        with pytest.raises(ValueError):
            harvest_pointers(b"short")


class TestPointerChase:
    def test_follows_chain_across_gaps(self):
        space = make_space(
            (0x10000, PAGE_SIZE, "ru", ptr_page(0x40000123)),
            (0x40000000, PAGE_SIZE, "ru", ptr_page(0x80000000)),
            (0x80000000, PAGE_SIZE, "rwu", b""),
        )
        pm = explore_from_pointers(space, quiet_prober(), SeedSet((0x10008,)))
        assert pm.accessible_pages() == [0x10000, 0x40000000, 0x80000000]

    def test_records_inaccessible_candidates(self):
        space = make_space((0x10000, PAGE_SIZE, "ru", ptr_page(0x77770000)))
        pm = explore_from_pointers(space, quiet_prober(), SeedSet((0x10000,)))
        assert pm.entries[0x77770000].accessible is False

    def test_never_reads_before_successful_tap(self):
        space = make_space(
            (0x10000, PAGE_SIZE, "ru", ptr_page(0x20000, 0x30000)),
            (0x20000, PAGE_SIZE, "", b""),  # tap says no; a read would fault
            (0x30000, PAGE_SIZE, "ru", b""),
        )
        p = Prober(ProbeConfig(spurious_abort_probability=0.0), trace=True)
        pm = explore_from_pointers(space, p, SeedSet((0x10000,)))
        assert pm.entries[0x20000].accessible is False
        assert pm.entries[0x30000].accessible is True

    def test_budget_bounds_probed_pages(self):
        # every page points at the next, far away
        regions = []
        addr = 0x10000
        for _ in range(12):
            nxt = addr + 0x100000
            regions.append((addr, PAGE_SIZE, "ru", ptr_page(nxt)))
            addr = nxt
        space = make_space(*regions)
        pm = explore_from_pointers(space, quiet_prober(), SeedSet((0x10000,)),
                                   budget=5)
        assert len(pm.entries) == 5

    def test_dedup_single_probe_per_page(self):
        # two seeds in the same page, page full of self references
        space = make_space((0x10000, PAGE_SIZE, "ru",
                            ptr_page(*([0x10008] * 16))))
        p = quiet_prober()
        explore_from_pointers(space, p, SeedSet((0x10000, 0x10100)))
        assert p.counters["taps"] == 1


class TestExploreModes:
    def layout(self):
        return make_space(
            (0x100000, 2 * PAGE_SIZE, "rxu", b"\x90" * 64),
            # 16-page hole
            (0x112000, PAGE_SIZE, "rwu", ptr_page(0x100010)),
            # enormous hole, bridged only by a pointer
            (0x70000000, PAGE_SIZE, "rwu", b""),
        )

    def test_linear_bridges_small_gaps_only(self):
        pm = explore(self.layout(), quiet_prober(), "linear",
                     SeedSet((0x100000,)), budget=4096, max_gap=64)
        assert 0x112000 in pm.accessible_pages()
        assert 0x70000000 not in pm.entries

    def test_linear_respects_max_gap(self):
        pm = explore(self.layout(), quiet_prober(), "linear",
                     SeedSet((0x100000,)), budget=4096, max_gap=4)
        assert 0x112000 not in pm.entries

    def test_pointer_chase_jumps_the_big_hole(self):
        space = make_space(
            (0x100000, PAGE_SIZE, "ru", ptr_page(0x70000000)),
            (0x70000000, PAGE_SIZE, "rwu", b""),
        )
        pm = explore(space, quiet_prober(), "pointer-chase",
                     SeedSet((0x100000,)))
        assert 0x70000000 in pm.accessible_pages()

    def test_hybrid_combines_both(self):
        pm = explore(self.layout(), quiet_prober(), "hybrid",
                     SeedSet((0x112008,)))
        # the sweep finds the data page; the harvest then reaches the code
        assert 0x100000 in pm.accessible_pages()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            explore(make_space(), quiet_prober(), "dfs", SeedSet((0x1000,)))


class TestRegionAround:
    def test_exact_extent(self):
        space = make_space(
            (0x20000, 3 * PAGE_SIZE, "rwu", b""),
            (0x23000, PAGE_SIZE, "ru", b""),  # adjacent but separate perms
        )
        lo, hi = region_around(space, quiet_prober(), 0x21234)
        assert (lo, hi) == (0x20000, 0x24000)  # accessibility merges them

    def test_inaccessible_anchor_rejected(self):
        with pytest.raises(ValueError):
            region_around(make_space(), quiet_prober(), 0x5000)


class TestReconstruct:
    def test_coalesces_equal_classes(self):
        space = make_space(
            (0x30000, 2 * PAGE_SIZE, "ru", b""),
            (0x32000, 2 * PAGE_SIZE, "rwu", b""),
        )
        recon = reconstruct_map(space, quiet_prober(), 0x2F000, 0x35000)
        kinds = [(r.start, r.end, r.kind) for r in recon.runs]
        assert kinds == [
            (0x2F000, 0x30000, Writability.INACCESSIBLE),
            (0x30000, 0x32000, Writability.READ_ONLY),
            (0x32000, 0x34000, Writability.WRITABLE),
            (0x34000, 0x35000, Writability.INACCESSIBLE),
        ]

    def test_all_unmapped_single_run(self):
        recon = reconstruct_map(make_space(), quiet_prober(), 0x0, 0x8000)
        assert recon.runs == (MapRun(0x0, 0x8000, Writability.INACCESSIBLE),)

    def test_alternating_pages_stay_uncoalesced(self):
        regions = []
        for i in range(6):
            perms = "ru" if i % 2 == 0 else "rwu"
            regions.append((0x40000 + i * PAGE_SIZE, PAGE_SIZE, perms, b""))
        space = make_space(*regions)
        recon = reconstruct_map(space, quiet_prober(), 0x40000, 0x46000)
        assert len(recon.runs) == 6
        assert all(r.end - r.start == PAGE_SIZE for r in recon.runs)

    def test_text_rendering(self):
        recon = ReconstructedMap(
            (MapRun(0x1000, 0x3000, Writability.READ_ONLY),)
        )
        assert recon.to_text() == "1000-3000 readonly\n"
        assert "r--p" in recon.to_maps_text()


class TestGroundTruthCompare:
    MAPS = (
        "00100000-00102000 r-xp 00000000 00:00 0\n"
        "00104000-00106000 rw-p 00000000 00:00 0\n"
    )

    def space(self):
        return make_space(
            (0x100000, 2 * PAGE_SIZE, "rxu", b""),
            (0x104000, 2 * PAGE_SIZE, "rwu", b""),
        )

    def test_truth_runs(self):
        truth = parse_proc_maps(self.MAPS)
        runs = truth_runs(truth, 0x100000, 0x106000)
        assert runs == (
            MapRun(0x100000, 0x102000, Writability.READ_ONLY),
            MapRun(0x102000, 0x104000, Writability.INACCESSIBLE),
            MapRun(0x104000, 0x106000, Writability.WRITABLE),
        )

    def test_match(self):
        truth = parse_proc_maps(self.MAPS)
        recon = reconstruct_map(self.space(), quiet_prober(), 0x100000, 0x106000)
        ok, mismatches = match_ground_truth(recon, truth)
        assert ok and mismatches == []

    def test_mismatch_reported(self):
        truth = parse_proc_maps(self.MAPS)
        wrong = ReconstructedMap(
            (MapRun(0x100000, 0x106000, Writability.WRITABLE),)
        )
        ok, mismatches = match_ground_truth(wrong, truth)
        assert not ok
        assert mismatches

    def test_empty_reconstruction_matches(self):
        ok, mm = match_ground_truth(ReconstructedMap(()), parse_proc_maps(self.MAPS))
        assert ok and mm == []


class TestEggHunt:
    def test_plant_at_offset(self):
        blob = bytearray(PAGE_SIZE)
        blob[0x123 : 0x123 + 8] = b"EGGSEGGS"
        space = make_space(
            (0x50000, PAGE_SIZE, "ru", bytes(blob)),
        )
        got = egg_hunt(space, quiet_prober(), b"EGGSEGGS", 0x4C000, 0x54000)
        assert got == 0x50123

    def test_straddling_pages(self):
        first = bytes(PAGE_SIZE - 3) + b"EGG"
        second = b"SEGGS" + bytes(PAGE_SIZE - 5)
        space = make_space((0x60000, 2 * PAGE_SIZE, "ru", first + second))
        got = egg_hunt(space, quiet_prober(), b"EGGSEGGS", 0x60000, 0x62000)
        assert got == 0x60000 + PAGE_SIZE - 3

    def test_no_straddle_into_inaccessible_page(self):
        first = bytes(PAGE_SIZE - 3) + b"EGG"
        space = make_space(
            (0x60000, PAGE_SIZE, "ru", first),
            (0x61000, PAGE_SIZE, "", b"SEGGS"),
        )
        got = egg_hunt(space, quiet_prober(), b"EGGSEGGS", 0x60000, 0x62000)
        assert got is None

    def test_absent_returns_none_without_faults(self):
        space = make_space((0x70000, PAGE_SIZE, "ru", b""))
        got = egg_hunt(space, quiet_prober(), b"EGGSEGGS", 0x60000, 0x80000)
        assert got is None

    def test_lowest_of_several(self):
        blob = bytearray(PAGE_SIZE)
        blob[0x800 : 0x808] = b"EGGSEGGS"
        blob[0x100 : 0x108] = b"EGGSEGGS"
        space = make_space((0x70000, PAGE_SIZE, "ru", bytes(blob)))
        assert egg_hunt(space, quiet_prober(), b"EGGSEGGS",
                        0x70000, 0x71000) == 0x70100

    def test_tag_length_bounds(self):
        space = make_space()
        with pytest.raises(ValueError):
            egg_hunt(space, quiet_prober(), b"abc", 0x0, 0x1000)
        with pytest.raises(ValueError):
            egg_hunt(space, quiet_prober(), b"x" * 33, 0x0, 0x1000)


def test_random_layout_agreement():
    # pointer chase against a hand-derived reachability oracle
    rng = random.Random(1234)
    for _ in range(20):
        n = rng.randint(2, 8)
        bases = sorted(
            rng.sample(range(0x1000, 0x40000000 // PAGE_SIZE), n)
        )
        bases = [b * PAGE_SIZE for b in bases]
        targets = {b: rng.choice(bases) for b in bases}
        space = make_space(
            *[(b, PAGE_SIZE, "ru", ptr_page(targets[b])) for b in bases]
        )
        seed = bases[0]
        reach = {seed}
        frontier = [seed]
        while frontier:
            cur = frontier.pop()
            nxt = targets[cur]
            if nxt not in reach:
                reach.add(nxt)
                frontier.append(nxt)
        pm = explore_from_pointers(space, quiet_prober(), SeedSet((seed,)))
        assert set(pm.accessible_pages()) == reach
