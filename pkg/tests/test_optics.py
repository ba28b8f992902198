import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdsync.optics import (
    ChannelTopology,
    CouplerSpec,
    Direction,
    FiberSegment,
    Mode,
    PowerLevel,
    PulseTrainConfig,
    arrival_at,
    attenuate,
    coupler_transfer,
    dbm_to_mw,
    frame_tiling,
    key_mode_attenuator_db,
    mean_photons,
    mw_to_dbm,
    power_from_photons,
    propagate_pulse,
    round_trip_schedule,
)

# independent constants for the oracles below
PLANCK = 6.62607015e-34
LIGHT_M_PER_S = 299_792_458.0


def photons_by_hand(mw: float, ns: float, nm: float) -> float:
    return mw * 1e-3 * ns * 1e-9 / (PLANCK * LIGHT_M_PER_S / (nm * 1e-9))


def lossless_topology(length_km: float = 0.0) -> ChannelTopology:
    return ChannelTopology(
        quantum_channel=(FiberSegment(length_km, alpha_db_per_km=0.0),),
        delay_line_alpha_db_per_km=0.0,
        mirror_loss_db=0.0,
        transceiver_internal_loss_db=0.0,
        coding_internal_loss_db=0.0,
    )


class TestPowerLevel:
    def test_one_milliwatt_is_zero_dbm_exactly(self):
        assert PowerLevel.from_mw(1.0).dbm == 0.0
        assert dbm_to_mw(0.0) == 1.0

    def test_known_conversions(self):
        assert PowerLevel.from_dbm(-30.0).mw == pytest.approx(1e-3, rel=1e-12)
        assert PowerLevel.from_dbm(10.0).mw == pytest.approx(10.0, rel=1e-12)
        assert PowerLevel.from_mw(0.5).watts == 5e-4

    def test_zero_power_is_minus_infinity_dbm(self):
        assert mw_to_dbm(0.0) == -math.inf

    def test_negative_power_rejected(self):
        with pytest.raises(ValueError):
            PowerLevel(-1e-9)

    @given(st.floats(-100.0, 30.0))
    def test_dbm_round_trip(self, p):
        assert abs(PowerLevel.from_dbm(p).dbm - p) < 1e-9

    @given(st.floats(1e-12, 1e3))
    def test_mw_round_trip_relative(self, mw):
        assert PowerLevel.from_dbm(PowerLevel.from_mw(mw).dbm).mw == pytest.approx(mw, rel=1e-9)


class TestPhotons:
    def test_one_milliwatt_one_nanosecond(self):
        n = mean_photons(PowerLevel.from_mw(1.0), 1.0, 1550.0)
        assert n == pytest.approx(photons_by_hand(1.0, 1.0, 1550.0), rel=1e-12)
        assert n == pytest.approx(7.8026e6, rel=1e-4)

    def test_inverse(self):
        p = power_from_photons(42.0, 2.0, 1310.0)
        assert mean_photons(p, 2.0, 1310.0) == pytest.approx(42.0, rel=1e-12)

    @given(st.floats(1e-9, 1e3), st.floats(0.01, 1e3), st.floats(300, 2000))
    def test_linear_in_power(self, mw, ns, nm):
        one = mean_photons(PowerLevel.from_mw(mw), ns, nm)
        two = mean_photons(PowerLevel.from_mw(2 * mw), ns, nm)
        assert two == pytest.approx(2 * one, rel=1e-12)

    @pytest.mark.parametrize("ns,nm", [(0.0, 1550.0), (-1.0, 1550.0), (1.0, 0.0), (math.nan, 1550.0)])
    def test_bad_duration_or_wavelength(self, ns, nm):
        with pytest.raises(ValueError):
            mean_photons(PowerLevel.from_mw(1.0), ns, nm)


class TestAttenuation:
    def test_two_db(self):
        assert attenuate(PowerLevel.from_dbm(0.0), 2.0).dbm == pytest.approx(-2.0, abs=1e-12)

    def test_ten_km_of_default_fibre(self):
        seg = FiberSegment(10.0)
        assert seg.loss_db == pytest.approx(2.0, abs=1e-12)
        assert attenuate(PowerLevel.from_dbm(0.0), seg.loss_db).dbm == pytest.approx(-2.0, abs=1e-12)

    def test_negative_loss_rejected(self):
        with pytest.raises(ValueError):
            attenuate(PowerLevel.from_mw(1.0), -0.1)

    @given(st.floats(-60, 20), st.floats(0, 50), st.floats(0, 50))
    def test_additive_in_db(self, p, a, b):
        p0 = PowerLevel.from_dbm(p)
        assert attenuate(attenuate(p0, a), b).dbm == pytest.approx(attenuate(p0, a + b).dbm, abs=1e-9)

    @pytest.mark.parametrize(
        "kwargs", [{"length_km": -1.0}, {"length_km": 1.0, "alpha_db_per_km": -0.1}, {"length_km": 1.0, "group_index": 0.9}]
    )
    def test_fibre_invariants(self, kwargs):
        with pytest.raises(ValueError):
            FiberSegment(**kwargs)


class TestCoupler:
    def test_ideal_split(self):
        through, tap = coupler_transfer(PowerLevel.from_mw(1.0), CouplerSpec(0.10, 0.0, excess_loss_db=0.0))
        assert through.mw == pytest.approx(0.90, rel=1e-12)
        assert tap.mw == pytest.approx(0.10, rel=1e-12)

    def test_fifteen_percent_tap(self):
        _, tap = coupler_transfer(PowerLevel.from_dbm(0.0), CouplerSpec(0.15, 0.0, excess_loss_db=0.0))
        assert tap.dbm == pytest.approx(10 * math.log10(0.15), abs=1e-12)
        assert tap.dbm == pytest.approx(-8.24, abs=0.005)

    def test_calibrated_fifteen_percent_tap(self):
        _, tap = coupler_transfer(PowerLevel.from_dbm(0.0), CouplerSpec(0.15, 0.0, excess_loss_db=1.36))
        assert tap.dbm == pytest.approx(-9.6, abs=0.01)

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.1, 1.5])
    def test_fraction_must_be_open_unit_interval(self, f):
        with pytest.raises(ValueError):
            CouplerSpec(f, 0.0)

    @given(st.floats(1e-6, 1e3), st.floats(0.001, 0.999), st.one_of(st.just(0.0), st.floats(1e-9, 10.0)))
    def test_energy_conservation(self, mw, f, excess):
        through, tap = coupler_transfer(PowerLevel.from_mw(mw), CouplerSpec(f, 0.0, excess_loss_db=excess))
        total = through.mw + tap.mw
        if excess == 0.0:
            assert total == pytest.approx(mw, rel=1e-12)
        else:
            assert total < mw


class TestTopology:
    def test_positions_must_be_sorted_and_inside(self):
        with pytest.raises(ValueError):
            ChannelTopology(couplers=(CouplerSpec(0.1, 0.7), CouplerSpec(0.1, 0.3)))
        with pytest.raises(ValueError):
            ChannelTopology(couplers=(CouplerSpec(0.1, 1.5),))

    def test_empty_channel_rejected(self):
        with pytest.raises(ValueError):
            ChannelTopology(quantum_channel=())

    def test_port_ids_default_and_named(self):
        topo = ChannelTopology(couplers=(CouplerSpec(0.1, 0.2), CouplerSpec(0.1, 0.5, name="eve")))
        assert topo.port_ids() == ["tap0", "eve"]

    def test_multi_segment_channel(self):
        topo = ChannelTopology(quantum_channel=(FiberSegment(0.4), FiberSegment(0.6, alpha_db_per_km=0.35)))
        assert topo.length_km == pytest.approx(1.0)
        assert topo.channel_loss_db() == pytest.approx(0.08 + 0.21)
        assert topo.fibre_loss_db(0.2, 0.7) == pytest.approx(0.2 * 0.2 + 0.3 * 0.35)


class TestPropagation:
    def test_round_trip_time_by_hand(self):
        arrivals = propagate_pulse(PulseTrainConfig(), ChannelTopology())
        expected_ns = 2 * (1.0 + 24.0) * 1.468 / (LIGHT_M_PER_S * 1e-12)
        assert arrival_at(arrivals, "detector").time_ns == pytest.approx(expected_ns, rel=1e-12)
        assert expected_ns == pytest.approx(244_800, rel=1e-3)

    def test_default_sync_pulse_is_multiphoton(self):
        train = PulseTrainConfig()
        det = arrival_at(propagate_pulse(train, ChannelTopology(), Mode.SYNC), "detector")
        # 3 + 0.2 + 2 + 4.8 + 1 + 4.8 + 2 + 0.2 + 3 dB around the loop
        assert det.mean_photons == pytest.approx(photons_by_hand(1.0, 1.0, 1550.0) * 10 ** (-2.1), rel=1e-9)
        assert det.mean_photons > 1e3

    def test_lossless_zero_length_limit(self):
        train = PulseTrainConfig()
        topo = lossless_topology(0.0)
        det = arrival_at(propagate_pulse(train, topo), "detector")
        assert det.mean_photons == pytest.approx(train.photons_per_pulse, rel=1e-12)
        assert det.time_ns == pytest.approx(2 * topo.delay_line.transit_ns, rel=1e-12)

    def test_node_order(self):
        topo = ChannelTopology(
            couplers=(CouplerSpec(0.1, 0.3, name="f"), CouplerSpec(0.1, 0.7, orientation="backward", name="b"))
        )
        nodes = [a.node_id for a in propagate_pulse(PulseTrainConfig(), topo)]
        assert nodes == ["transceiver_out", "f", "coding_in", "mirror", "coding_out", "b", "transceiver_in", "detector"]

    def test_key_mode_sets_mu_at_coding_output(self):
        train, topo = PulseTrainConfig(), ChannelTopology()
        out = arrival_at(propagate_pulse(train, topo, Mode.KEY, mu_key=0.2), "coding_out")
        assert out.mean_photons == pytest.approx(0.2, rel=1e-9)
        assert key_mode_attenuator_db(topo, train, 0.2) > 0

    def test_tap_port_power(self):
        train = PulseTrainConfig()
        topo = ChannelTopology(couplers=(CouplerSpec(0.10, 0.5, excess_loss_db=0.0, name="eve"),))
        eve = arrival_at(propagate_pulse(train, topo), "eve")
        expected = train.photons_per_pulse * 10 ** (-(3.0 + 0.1) / 10) * 0.10
        assert eve.mean_photons == pytest.approx(expected, rel=1e-9)
        assert eve.direction is Direction.FORWARD

    @settings(max_examples=60, deadline=None)
    @given(
        length=st.floats(0.0, 20.0),
        fractions=st.lists(st.floats(0.01, 0.5), min_size=1, max_size=3),
        data=st.data(),
    )
    def test_taps_never_move_arrival_times(self, length, fractions, data):
        positions = sorted(data.draw(st.lists(st.floats(0.0, 1.0), min_size=len(fractions), max_size=len(fractions), unique=True)))
        couplers = tuple(
            CouplerSpec(f, p * length, orientation=data.draw(st.sampled_from(list(Direction))))
            for f, p in zip(fractions, positions)
        )
        if len({c.position_km for c in couplers}) < len(couplers):
            return
        bare = ChannelTopology(quantum_channel=(FiberSegment(length),))
        tapped = bare.with_couplers(couplers)
        train = PulseTrainConfig()
        for mode in Mode:
            a = {x.node_id: x for x in propagate_pulse(train, bare, mode)}
            b = {x.node_id: x for x in propagate_pulse(train, tapped, mode)}
            for node, arr in a.items():
                assert b[node].time_ns == arr.time_ns
                assert b[node].mean_photons <= arr.mean_photons * (1 + 1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        length=st.floats(0.0, 100.0),
        internal=st.floats(0.0, 10.0),
        coding=st.floats(0.0, 10.0),
        mirror=st.floats(0.0, 5.0),
        mu=st.floats(1e-3, 5.0),
        peak_dbm=st.floats(-60.0, 10.0),
    )
    def test_key_mode_never_exceeds_mu_at_transceiver(self, length, internal, coding, mirror, mu, peak_dbm):
        topo = ChannelTopology(
            quantum_channel=(FiberSegment(length),),
            transceiver_internal_loss_db=internal,
            coding_internal_loss_db=coding,
            mirror_loss_db=mirror,
        )
        train = PulseTrainConfig(peak_power=PowerLevel.from_dbm(peak_dbm))
        back = arrival_at(propagate_pulse(train, topo, Mode.KEY, mu), "transceiver_in")
        assert back.mean_photons <= mu * (1 + 1e-9)


class TestSchedule:
    def test_single_window(self):
        assert frame_tiling(300.0, 300.0) == (1, 300.0)

    def test_ceiling(self):
        assert frame_tiling(1000.0, 300.0) == (4, 1200.0)

    def test_default_frame(self):
        t_rt, n_w, t_s = round_trip_schedule(ChannelTopology(), 300.0)
        assert n_w == math.ceil(t_rt * 1e3 / 300.0)
        assert n_w == 816_121
        assert abs(n_w - 816_000) / 816_000 < 1e-3
        assert t_s == pytest.approx(n_w * 0.3, rel=1e-15)
        assert t_s >= t_rt

    @given(st.floats(1.0, 1e9), st.floats(1.0, 1e4))
    def test_tiling_covers(self, t_rt, t_w):
        n_w, t_s = frame_tiling(t_rt, t_w)
        assert t_s >= t_rt
        assert (n_w - 1) * t_w < t_rt
        assert t_s == n_w * t_w
