use std::time::Duration;

use proptest::prelude::*;
use vcosim::bus::{decode_frame, encode_frame, match_topic, Broker, BusEnvelope, Kind, TcpBroker, TcpBusClient};

fn segment() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_+.-]{1,8}"
}

fn topic() -> impl Strategy<Value = String> {
    prop::collection::vec(segment(), 1..5).prop_map(|s| s.join("/"))
}

fn filter() -> impl Strategy<Value = String> {
    (topic(), any::<bool>()).prop_map(|(t, wild)| if wild { format!("{t}/#") } else { t })
}

pub fn envelope() -> impl Strategy<Value = BusEnvelope> {
    let cid = "[a-z0-9/_-]{1,12}";
    let ts = any::<u64>();
    prop_oneof![
        (cid, ts).prop_map(|(c, ts)| BusEnvelope::connect(c, ts)),
        (cid, filter(), ts).prop_map(|(c, f, ts)| BusEnvelope::subscribe(c, f, ts)),
        (cid, filter(), ts).prop_map(|(c, f, ts)| BusEnvelope::unsubscribe(c, f, ts)),
        (cid, filter(), ts).prop_map(|(c, f, ts)| BusEnvelope { kind: Kind::Suback, ..BusEnvelope::subscribe(c, f, ts) }),
        (cid, topic(), prop::collection::vec(any::<u8>(), 0..512), ts)
            .prop_map(|(c, t, p, ts)| BusEnvelope::publish(c, t, p, ts)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn codec_round_trip(env in envelope()) {
        let bytes = encode_frame(&env).unwrap();
        let (back, used) = decode_frame(&bytes).unwrap().unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, env);
        // A truncated frame is incomplete, never an error.
        prop_assert!(decode_frame(&bytes[..bytes.len() - 1]).unwrap().is_none());
    }
}

proptest! {
    #[test]
    fn back_to_back_frames_decode_in_order(envs in prop::collection::vec(envelope(), 1..20)) {
        let mut buf = Vec::new();
        for e in &envs {
            buf.extend(encode_frame(e).unwrap());
        }
        let mut at = 0;
        for e in &envs {
            let (back, used) = decode_frame(&buf[at..]).unwrap().unwrap();
            prop_assert_eq!(&back, e);
            at += used;
        }
        prop_assert_eq!(at, buf.len());
    }

    #[test]
    fn every_topic_matches_itself_and_its_prefix_wildcards(t in topic()) {
        prop_assert!(match_topic(&t, &t));
        prop_assert!(match_topic("#", &t));
        let segs: Vec<&str> = t.split('/').collect();
        for k in 1..=segs.len() {
            let f = format!("{}/#", segs[..k].join("/"));
            prop_assert!(match_topic(&f, &t));
        }
    }

    /// Broker delivery equals a brute-force "does any filter match" oracle.
    #[test]
    fn broker_delivery_matches_oracle(
        subs in prop::collection::vec(prop::collection::vec(filter(), 0..4), 1..6),
        topics in prop::collection::vec(topic(), 1..20),
    ) {
        let mut b = Broker::new(16);
        b.connect("pub").unwrap();
        for (i, filters) in subs.iter().enumerate() {
            let id = format!("c{i}");
            b.connect(&id).unwrap();
            for f in filters {
                b.subscribe(&id, f, 0).unwrap();
            }
        }
        for (seq, t) in topics.iter().enumerate() {
            b.publish(&BusEnvelope::publish("pub", t.as_str(), vec![seq as u8], seq as u64)).unwrap();
        }
        for (i, filters) in subs.iter().enumerate() {
            let got: Vec<u64> = b.drain(&format!("c{i}")).iter().map(|e| e.ts).collect();
            let want: Vec<u64> = topics
                .iter()
                .enumerate()
                .filter(|(_, t)| filters.iter().any(|f| match_topic(f, t)))
                .map(|(s, _)| s as u64)
                .collect();
            prop_assert_eq!(got, want);
        }
    }
}

#[test]
fn fan_out_to_three_wildcard_subscribers() {
    let mut b = Broker::new(8);
    b.connect("pub").unwrap();
    for c in ["a", "b", "c"] {
        b.connect(c).unwrap();
        b.subscribe(c, "veh/#", 0).unwrap();
    }
    let to = b.publish(&BusEnvelope::publish("pub", "veh/1/state", b"x".to_vec(), 1)).unwrap();
    assert_eq!(to, vec!["a", "b", "c"]);
    for c in ["a", "b", "c"] {
        let got = b.drain(c);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].topic, "veh/1/state");
    }
    assert!(b.drain("pub").is_empty(), "publisher is not subscribed");
}

#[test]
fn overlapping_filters_deliver_once() {
    let mut b = Broker::new(8);
    b.connect("s").unwrap();
    b.subscribe("s", "veh/#", 0).unwrap();
    b.subscribe("s", "veh/1/state", 0).unwrap();
    b.connect("p").unwrap();
    b.publish(&BusEnvelope::publish("p", "veh/1/state", vec![], 0)).unwrap();
    assert_eq!(b.drain("s").len(), 1);
}

#[test]
fn thousand_publishes_arrive_in_order_everywhere() {
    let mut b = Broker::new(8);
    b.connect("p").unwrap();
    for c in ["s1", "s2", "s3"] {
        b.connect(c).unwrap();
        b.subscribe(c, "sim/clock", 0).unwrap();
    }
    for i in 0..1000u64 {
        b.publish(&BusEnvelope::publish("p", "sim/clock", i.to_be_bytes().to_vec(), i)).unwrap();
    }
    let expected: Vec<u64> = (0..1000).collect();
    for c in ["s1", "s2", "s3"] {
        let got: Vec<u64> = b.drain(c).iter().map(|e| u64::from_be_bytes(e.payload[..].try_into().unwrap())).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn disconnect_leaves_no_state() {
    let mut b = Broker::new(8);
    for c in ["p", "s1", "s2"] {
        b.connect(c).unwrap();
    }
    b.subscribe("s1", "#", 0).unwrap();
    b.subscribe("s2", "a/b", 0).unwrap();
    for i in 0..10 {
        b.publish(&BusEnvelope::publish("p", "a/b", vec![i], 0)).unwrap();
    }
    assert_eq!(b.pending(), 20);
    for c in ["p", "s1", "s2"] {
        assert!(b.disconnect(c));
    }
    assert!(b.is_clean());
    assert_eq!(b.client_count(), 0);
    // Reconnecting under the same id starts with no filters.
    b.connect("s1").unwrap();
    b.connect("p").unwrap();
    b.publish(&BusEnvelope::publish("p", "a/b", vec![], 0)).unwrap();
    assert!(b.drain("s1").is_empty());
}

#[test]
fn tcp_fan_out_fifo_and_cleanup() {
    let broker = TcpBroker::start("127.0.0.1:0", 8).unwrap();
    let addr = broker.local_addr();
    let wait = Duration::from_secs(5);
    let mut subs: Vec<TcpBusClient> = (0..3).map(|i| TcpBusClient::connect(addr, &format!("s{i}")).unwrap()).collect();
    for s in &mut subs {
        s.subscribe("veh/#", wait).unwrap();
        s.subscribe("veh/1/state", wait).unwrap();
    }
    let mut p = TcpBusClient::connect(addr, "p").unwrap();
    for i in 0..200u64 {
        p.publish("veh/1/state", &i.to_be_bytes(), i).unwrap();
    }
    for s in &subs {
        for i in 0..200u64 {
            let env = s.recv_timeout(wait).expect("delivery");
            assert_eq!(env.ts, i);
            assert_eq!(env.client_id, "p");
        }
        assert!(s.recv_timeout(Duration::from_millis(100)).is_none(), "overlapping filters deliver once");
    }
    assert!(p.recv_timeout(Duration::from_millis(50)).is_none());
    drop(subs);
    drop(p);
    let deadline = std::time::Instant::now() + wait;
    while broker.client_count() > 0 && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(broker.client_count(), 0);
    broker.shutdown();
}
