import pytest

from swarmwatch.core import RAW, NodeId, RequestType, hash_content
from swarmwatch.errors import ProbeUnreachableError
from swarmwatch.netsim import (
    NodeKind,
    SimConfig,
    build_network,
    dht_provide,
    node_request,
    purge_cache,
    run,
)
from swarmwatch.pipeline import mark_flags, unify
from swarmwatch.probes import (
    cross_reference,
    idw,
    probe_gateway,
    tnw,
    tpi,
)

NS = 1_000_000_000


def scripted_net(**kwargs):
    return build_network(SimConfig(degree_range=(0, 0), **kwargs))


def flagged_trace(net):
    return mark_flags(unify(net.traces))


class TestIdw:
    def test_unrequested_cid_empty(self):
        net = scripted_net()
        net.add_node(NodeKind.MONITOR)
        assert idw(flagged_trace(net), hash_content(b"q", RAW)) == {}

    def test_monitored_requesters_discovered_exactly(self):
        net = scripted_net()
        a = net.add_node(NodeKind.DHT_CLIENT)
        b = net.add_node(NodeKind.DHT_CLIENT)
        p = net.add_node(NodeKind.DHT_SERVER)
        net.add_node(NodeKind.MONITOR)
        m = net.monitors[0]
        for x in (a, b):
            net.connect(x, m, latency_s=0.02)
            net.connect(x, p, latency_s=0.01)
        cid = hash_content(b"wanted", RAW)
        dht_provide(net, p, cid)
        node_request(net, a, cid)
        net.run_for(10.0)
        node_request(net, b, cid)
        net.run_for(10.0)
        found = idw(flagged_trace(net), cid)
        assert set(found) == {a, b}
        assert found[a] < found[b]

    def test_unmonitored_requester_invisible(self):
        net = scripted_net()
        a = net.add_node(NodeKind.DHT_CLIENT)
        hidden = net.add_node(NodeKind.DHT_CLIENT)
        p = net.add_node(NodeKind.DHT_SERVER)
        net.add_node(NodeKind.MONITOR)
        m = net.monitors[0]
        net.connect(a, m, latency_s=0.02)
        net.connect(a, p, latency_s=0.01)
        net.connect(hidden, p, latency_s=0.01)
        cid = hash_content(b"wanted", RAW)
        dht_provide(net, p, cid)
        node_request(net, a, cid)
        node_request(net, hidden, cid)
        net.run_for(5.0)
        assert set(idw(flagged_trace(net), cid)) == {a}

    def test_rebroadcasts_do_not_duplicate_wanters(self):
        net = scripted_net()
        a = net.add_node(NodeKind.DHT_CLIENT)
        net.add_node(NodeKind.MONITOR)
        net.connect(a, net.monitors[0], latency_s=0.02)
        cid = hash_content(b"unresolvable", RAW)
        node_request(net, a, cid)
        net.run_for(100.0)
        trace = flagged_trace(net)
        assert len([r for r in trace if r.cid == cid]) == 4
        assert set(idw(trace, cid)) == {a}


class TestTnw:
    def test_unknown_target_empty(self):
        net = scripted_net()
        net.add_node(NodeKind.MONITOR)
        assert tnw(flagged_trace(net), NodeId(12)) == []

    def test_scripted_requests_recovered(self):
        net = scripted_net()
        a = net.add_node(NodeKind.DHT_CLIENT)
        p = net.add_node(NodeKind.DHT_SERVER)
        net.add_node(NodeKind.MONITOR)
        net.connect(a, net.monitors[0], latency_s=0.02)
        net.connect(a, p, latency_s=0.01)
        cids = [hash_content(bytes([i]), RAW) for i in range(5)]
        for cid in cids:
            dht_provide(net, p, cid)
        for cid in cids:
            node_request(net, a, cid)
            net.run_for(1.0)
        wants = tnw(flagged_trace(net), a)
        assert [w[2] for w in wants] == cids
        assert all(w[1] is RequestType.WANT_HAVE for w in wants)

    def test_rebroadcasts_excluded(self):
        net = scripted_net()
        a = net.add_node(NodeKind.DHT_CLIENT)
        net.add_node(NodeKind.MONITOR)
        net.connect(a, net.monitors[0], latency_s=0.02)
        cid = hash_content(b"never", RAW)
        node_request(net, a, cid)
        net.run_for(125.0)
        wants = tnw(flagged_trace(net), a)
        assert len(wants) == 1  # one user action, several wire messages


class TestTpi:
    def make_world(self):
        net = scripted_net()
        target = net.add_node(NodeKind.DHT_CLIENT)
        provider = net.add_node(NodeKind.DHT_SERVER)
        prober = net.add_node(NodeKind.DHT_CLIENT)
        net.connect(target, provider, latency_s=0.01)
        cid = hash_content(b"sensitive", RAW)
        dht_provide(net, provider, cid)
        return net, target, prober, cid

    def test_fetched_then_positive(self):
        net, target, prober, cid = self.make_world()
        node_request(net, target, cid)
        assert tpi(net, prober, target, cid) is True

    def test_never_seen_negative(self):
        net, target, prober, cid = self.make_world()
        assert tpi(net, prober, target, cid) is False

    def test_purge_lifecycle(self):
        net, target, prober, cid = self.make_world()
        node_request(net, target, cid)
        assert tpi(net, prober, target, cid) is True
        purge_cache(net, target, cid)
        assert tpi(net, prober, target, cid) is False
        node_request(net, target, cid)
        assert tpi(net, prober, target, cid) is True

    def test_offline_target_unreachable(self):
        net, target, prober, cid = self.make_world()
        net.set_offline(target)
        with pytest.raises(ProbeUnreachableError):
            tpi(net, prober, target, cid)

    def test_matches_ground_truth_oracle(self):
        net, target, prober, cid = self.make_world()
        checks = []
        node_request(net, target, cid)
        checks.append((tpi(net, prober, target, cid), net.ground_truth.cached(target, cid, net.now_ns)))
        purge_cache(net, target, cid)
        checks.append((tpi(net, prober, target, cid), net.ground_truth.cached(target, cid, net.now_ns)))
        node_request(net, target, cid)
        checks.append((tpi(net, prober, target, cid), net.ground_truth.cached(target, cid, net.now_ns)))
        assert all(probe == oracle for probe, oracle in checks)


def gateway_world(n_backing: int, seed: int = 0, **kw):
    cfg = SimConfig(
        n_dht_servers=5,
        n_clients=0,
        n_gateways=n_backing,
        n_monitors=2,
        degree_range=(2, 4),
        catalog_size=10,
        seed=seed,
        gateway_group_sizes=(n_backing,),
        gateway_cache_hit_ratio=0.0,
        **kw,
    )
    net = build_network(cfg)
    run(net, 0.0)
    return net


class TestProbeGateway:
    def test_single_backing_node_discovered(self):
        net = gateway_world(1)
        res = probe_gateway(net, "gw0.example", net.monitors, seed=1)
        assert res.discovered_node_ids == frozenset(net.ground_truth.gateway_map["gw0.example"])
        assert all(res.http_succeeded)
        assert res.probes_sent == 6  # 1 discovery + 5 stalls

    def test_thirteen_backing_nodes_all_discovered(self):
        net = gateway_world(13)
        res = probe_gateway(net, "gw0.example", net.monitors, seed=2)
        assert res.discovered_node_ids == frozenset(net.ground_truth.gateway_map["gw0.example"])
        assert len(res.discovered_node_ids) == 13

    def test_distinct_seeds_no_cross_attribution(self):
        cfg = SimConfig(
            n_dht_servers=5, n_gateways=2, n_monitors=1, degree_range=(2, 4),
            catalog_size=10, seed=4, gateway_group_sizes=(1, 1),
        )
        net = build_network(cfg)
        run(net, 0.0)
        r0 = probe_gateway(net, "gw0.example", net.monitors, seed=10)
        r1 = probe_gateway(net, "gw1.example", net.monitors, seed=11)
        truth = net.ground_truth.gateway_map
        assert r0.discovered_node_ids == frozenset(truth["gw0.example"])
        assert r1.discovered_node_ids == frozenset(truth["gw1.example"])
        assert not (r0.discovered_node_ids & r1.discovered_node_ids)

    def test_broken_gateway_discovered_without_http(self):
        net = gateway_world(1, broken_gateway_names=("gw0.example",))
        res = probe_gateway(net, "gw0.example", net.monitors, seed=3)
        assert not any(res.http_succeeded)
        assert len(res.discovered_node_ids) == 1


class TestCrossReference:
    def test_single_node_single_address(self):
        net = gateway_world(1)
        res = probe_gateway(net, "gw0.example", net.monitors, seed=5)
        entries = cross_reference([res], flagged_trace(net))
        assert len(entries) == 1
        entry = entries[0]
        assert entry.dns_names == ("gw0.example",)
        assert not entry.multi_address and not entry.shared_address
        gw_node = next(iter(res.discovered_node_ids))
        assert entry.addresses == (net.nodes[gw_node].address,)

    def test_multi_address_flagged(self):
        net = gateway_world(1)
        res = probe_gateway(net, "gw0.example", net.monitors, seed=6)
        gw_node = next(iter(res.discovered_node_ids))
        # the node shows up again later under a different endpoint
        net.nodes[gw_node].address = "/ip4/198.51.100.99/tcp/4001"
        probe_gateway(net, "gw0.example", net.monitors, seed=7)
        entries = cross_reference([res], flagged_trace(net))
        assert entries[0].multi_address

    def test_shared_address_flagged(self):
        net = gateway_world(2)
        a, b = net.ground_truth.gateway_map["gw0.example"]
        net.nodes[b].address = net.nodes[a].address
        res = probe_gateway(net, "gw0.example", net.monitors, seed=8)
        entries = cross_reference([res], flagged_trace(net))
        assert all(e.shared_address for e in entries if e.node in (a, b))
