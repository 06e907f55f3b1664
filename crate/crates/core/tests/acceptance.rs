//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see the lines; the test fails if any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pqtt::bench::{bench_certgen, read_csv, BenchConfig};
use pqtt::client::{ClientError, ClientSession};
use pqtt::clock::{Clock, OffsetClock, SystemClock};
use pqtt::codec::{decode_packet, encode_packet, ConnectReturnCode, DecodeOutcome, PacketType, QoS};
use pqtt::devices::{
    run_publisher, status_topic, PublisherConfig, SimulatedPir, Subscriber, SubscriberConfig,
};
use pqtt::pki::{
    registry, verify, verify_certificate, Certificate, Role, VerifyError, FALCON_1024, RSA_2048,
};
use pqtt::testkit::{
    Collector, Direction, FaultAction, FaultProxy, FaultScript, TestCa, TestNet, TwoCaFixture,
};
use pqtt::topic::{matches, parse_filter, SubscriptionTrie, TopicName};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ac1_codec_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac01);
    let mut per_type: HashMap<PacketType, usize> = HashMap::new();
    let mut prefixes = 0usize;
    for i in 0..10_000 {
        let kind = common::ALL_TYPES[i % common::ALL_TYPES.len()];
        let p = common::random_packet_of(&mut rng, kind);
        let bytes = encode_packet(&p).map_err(|e| format!("encode {p:?}: {e}"))?;
        match decode_packet(&bytes) {
            DecodeOutcome::Complete(q, n) if q == p && n == bytes.len() => {}
            other => return Err(format!("round trip of {kind:?} gave {other:?}")),
        }
        for cut in 0..bytes.len() {
            match decode_packet(&bytes[..cut]) {
                DecodeOutcome::NeedMoreData(k) if k >= 1 => {}
                other => return Err(format!("prefix {cut}/{} of {kind:?} gave {other:?}", bytes.len())),
            }
            prefixes += 1;
        }
        *per_type.entry(kind).or_default() += 1;
    }
    let elapsed = started.elapsed();
    check(per_type.len() == 14, "not every packet type exercised")?;
    check(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("10000 packets, 14 types, {prefixes} prefixes, {elapsed:.2?}"))
}

fn ac2_router_oracle() -> Outcome {
    let filters = common::filter_universe();
    let topics = common::topic_universe();
    let mut trie = SubscriptionTrie::new();
    for (i, f) in filters.iter().enumerate() {
        trie.insert(&parse_filter(f).unwrap(), i, QoS::AtMostOnce);
    }
    let mut discrepancies = 0;
    for t in &topics {
        let name = TopicName::new(t.as_str()).unwrap();
        let routed = trie.match_subscribers(&name);
        for (i, f) in filters.iter().enumerate() {
            let expected = common::naive_match(f, t);
            if matches(&parse_filter(f).unwrap(), &name) != expected {
                discrepancies += 1;
            }
            if routed.contains_key(&i) != expected {
                discrepancies += 1;
            }
        }
    }
    check(discrepancies == 0, format!("{discrepancies} discrepancies"))?;
    Ok(format!(
        "{} filters x {} topics, matcher and trie agree with the reference",
        filters.len(),
        topics.len()
    ))
}

fn flip_sweep_signature(scheme: pqtt::pki::SchemeId, id: &pqtt::testkit::Identity) -> Result<usize, String> {
    let msg = b"single-bit flip sweep";
    let sig = id.keypair.sign(msg).map_err(|e| e.to_string())?;
    check(verify(scheme, id.keypair.public_key(), msg, &sig), "unmodified signature rejected")?;
    let mut mutated = sig.clone();
    for bit in 0..sig.len() * 8 {
        mutated[bit / 8] ^= 1 << (bit % 8);
        if verify(scheme, id.keypair.public_key(), msg, &mutated) {
            return Err(format!("signature bit {bit} flip accepted"));
        }
        mutated[bit / 8] ^= 1 << (bit % 8);
    }
    Ok(sig.len() * 8)
}

fn flip_sweep_certificate(cert: &Certificate, root: &Certificate) -> Result<usize, String> {
    let bytes = cert.to_bytes().map_err(|e| e.to_string())?;
    check(verify_certificate(cert, root, 1).is_ok(), "unmodified certificate rejected")?;
    let mut mutated = bytes.clone();
    for bit in 0..bytes.len() * 8 {
        mutated[bit / 8] ^= 1 << (bit % 8);
        if let Ok(c) = Certificate::from_bytes(&mutated) {
            if verify_certificate(&c, root, 1).is_ok() {
                return Err(format!("certificate bit {bit} flip accepted"));
            }
        }
        mutated[bit / 8] ^= 1 << (bit % 8);
    }
    Ok(bytes.len() * 8)
}

fn ac3_pki_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac03);
    let mut details = Vec::new();
    for scheme in [FALCON_1024, RSA_2048] {
        let name = registry().get(scheme).unwrap().descriptor().name;
        let ca = TestCa::new("pqtt-ca", scheme);
        let dev = ca.issue("pub-01", Role::Publisher, scheme);
        for i in 0..500 {
            let len = rng.gen_range(0..2048);
            let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let sig = dev.keypair.sign(&msg).map_err(|e| e.to_string())?;
            check(
                verify(scheme, dev.keypair.public_key(), &msg, &sig),
                format!("{name}: message {i} failed to verify"),
            )?;
        }
        let sig_bits = flip_sweep_signature(scheme, &dev)?;
        let cert_bits = flip_sweep_certificate(&dev.certificate, &ca.certificate)?;

        let bounded = ca.issue_with_validity("pub-02", Role::Publisher, scheme, 1_000, 2_000);
        let at = |now| verify_certificate(&bounded.certificate, &ca.certificate, now);
        check(at(2_000).is_ok(), format!("{name}: now = not_after rejected"))?;
        check(at(2_001) == Err(VerifyError::Expired), format!("{name}: not_after + 1 accepted"))?;
        check(at(1_000).is_ok(), format!("{name}: now = not_before rejected"))?;
        check(at(999) == Err(VerifyError::NotYetValid), format!("{name}: not_before - 1 accepted"))?;
        details.push(format!("{name}: 500 ok, {sig_bits} sig flips, {cert_bits} cert flips rejected"));
    }
    Ok(details.join("; "))
}

fn read_log(path: &std::path::Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line is JSON"))
        .collect()
}

fn ac4_end_to_end() -> Outcome {
    let started = Instant::now();
    let net = TestNet::start(|_| {});
    let publisher = net.identity("pub-01", Role::Publisher);
    let subscriber = net.identity("sub-01", Role::Subscriber);
    let log_path = net.log_path("events.log");

    let mut sub_cfg = SubscriberConfig::new(net.client_config("sub-01", net.addr()));
    sub_cfg.log_path = log_path.clone();
    let sub = Subscriber::start(&sub_cfg, net.ca.credentials(&subscriber), net.clock.clone())
        .map_err(|e| e.to_string())?;
    check(sub.wait_ready(Duration::from_secs(10)).map_err(|e| e.to_string())?, "subscription not granted")?;

    let mut pub_cfg = PublisherConfig::new(net.client_config("pub-01", net.addr()));
    pub_cfg.heartbeat_interval = Duration::from_secs(3600);
    pub_cfg.exit_when_exhausted = true;
    let schedule: Vec<u64> = (1..=100).map(|i| i * 20).collect();
    let mut source = SimulatedPir::from_schedule_ms(&schedule);
    let stop = AtomicBool::new(false);
    let report = run_publisher(&pub_cfg, net.ca.credentials(&publisher), &mut source, net.clock.clone(), None, &stop)
        .map_err(|e| e.to_string())?;
    check(report.events_published == 100, format!("published {}", report.events_published))?;

    pqtt::testkit::wait_until(Duration::from_secs(10), || sub.received() >= 100);
    thread::sleep(Duration::from_millis(200));
    let report = sub.stop();
    let records = read_log(&log_path);
    let seqs: Vec<u64> = records.iter().map(|r| r["event_seq"].as_u64().unwrap()).collect();
    let elapsed = started.elapsed();
    check(records.len() == 100, format!("log has {} lines", records.len()))?;
    check(seqs == (1..=100).collect::<Vec<_>>(), "log out of sequence order")?;
    check(report.rejected == 0, format!("{} rejections", report.rejected))?;
    check(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("100 events logged in order, 0 rejections, {elapsed:.2?}"))
}

struct QosRun {
    deliveries: usize,
    dup_seen: bool,
}

fn qos_scenario(qos: QoS, script: FaultScript) -> Result<QosRun, String> {
    let net = TestNet::start(|_| {});
    let publisher = net.identity("pub-01", Role::Publisher);
    let subscriber = net.identity("sub-01", Role::Subscriber);
    let sub = net.connect(&subscriber).map_err(|e| e.to_string())?;
    let got = Collector::new();
    sub.subscribe("motion-sensor", QoS::ExactlyOnce, got.handler()).map_err(|e| e.to_string())?;

    let proxy = FaultProxy::start(net.addr(), script).map_err(|e| e.to_string())?;
    let publisher = net.connect_via(&publisher, proxy.local_addr()).map_err(|e| e.to_string())?;
    publisher.publish("motion-sensor", b"{}", qos).map_err(|e| e.to_string())?;
    got.wait_for(1, Duration::from_secs(5));
    thread::sleep(Duration::from_millis(700));
    let dup_seen = proxy.observations().iter().any(|o| {
        o.direction == Direction::ClientToBroker
            && matches!(&o.packet, pqtt::codec::Packet::Publish(p) if p.dup)
    });
    publisher.disconnect();
    sub.disconnect();
    Ok(QosRun {
        deliveries: got.len(),
        dup_seen,
    })
}

fn ac5_qos_under_faults() -> Outcome {
    let mut qos1 = Vec::new();
    let mut qos2 = Vec::new();
    for _ in 0..20 {
        let r = qos_scenario(
            QoS::AtLeastOnce,
            FaultScript::new().rule(Direction::BrokerToClient, PacketType::PubAck, 1, FaultAction::Drop),
        )?;
        check((1..=2).contains(&r.deliveries), format!("QoS1 delivered {} times", r.deliveries))?;
        check(r.dup_seen, "QoS1 retransmit without DUP")?;
        qos1.push(r.deliveries);
        let r = qos_scenario(
            QoS::ExactlyOnce,
            FaultScript::new().rule(Direction::ClientToBroker, PacketType::Publish, 1, FaultAction::Duplicate),
        )?;
        check(r.deliveries == 1, format!("QoS2 delivered {} times", r.deliveries))?;
        qos2.push(r.deliveries);
    }
    check(qos1.iter().all(|d| *d == qos1[0]), format!("QoS1 outcomes vary: {qos1:?}"))?;
    Ok(format!(
        "QoS1 dropped PubAck: {} delivery, DUP seen, x20; QoS2 duplicated PUBLISH: 1 delivery, x20",
        qos1[0]
    ))
}

fn tamper_run(verify_at_broker: bool) -> Result<(u64, u64, usize, u64), String> {
    let net = TestNet::start(|c| c.verify_at_broker = verify_at_broker);
    let publisher = net.identity("pub-01", Role::Publisher);
    let subscriber = net.identity("sub-01", Role::Subscriber);
    let sub = net.connect(&subscriber).map_err(|e| e.to_string())?;
    let got = Collector::new();
    sub.subscribe("motion-sensor", QoS::AtLeastOnce, got.handler()).map_err(|e| e.to_string())?;
    let script = FaultScript::new().rule(
        Direction::ClientToBroker,
        PacketType::Publish,
        50,
        FaultAction::TamperByte(200),
    );
    let proxy = FaultProxy::start(net.addr(), script).map_err(|e| e.to_string())?;
    let publisher = net.connect_via(&publisher, proxy.local_addr()).map_err(|e| e.to_string())?;
    for i in 0..100 {
        publisher
            .publish("motion-sensor", format!("{{\"n\":{i}}}").as_bytes(), QoS::AtLeastOnce)
            .map_err(|e| e.to_string())?;
    }
    let target = if verify_at_broker { 99 } else { 100 };
    pqtt::testkit::wait_until(Duration::from_secs(10), || got.len() as u64 + sub.stats().rejected >= target);
    thread::sleep(Duration::from_millis(300));
    let counters = net.broker.counters();
    let rejected = sub.stats().rejected;
    publisher.disconnect();
    sub.disconnect();
    Ok((counters.forwarded, counters.dropped, got.len(), rejected))
}

fn ac6_tamper_gate() -> Outcome {
    let (forwarded, dropped, delivered, rejected) = tamper_run(true)?;
    check(
        forwarded == 99 && dropped == 1 && delivered == 99 && rejected == 0,
        format!("verify on: forwarded={forwarded} dropped={dropped} delivered={delivered} rejected={rejected}"),
    )?;
    let (f2, d2, del2, rej2) = tamper_run(false)?;
    check(
        rej2 == 1 && del2 == 99 && d2 == 0,
        format!("verify off: forwarded={f2} dropped={d2} delivered={del2} rejected={rej2}"),
    )?;
    Ok(format!(
        "broker verify on: forwarded {forwarded}, dropped {dropped}, subscriber rejections {rejected}; off: subscriber rejections {rej2}"
    ))
}

fn ac7_benchmark() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = BenchConfig {
        output: dir.path().join("results.csv"),
        ..BenchConfig::default()
    };
    check(config.iterations == 25, "default iterations is not 25")?;
    let (_, summary) = bench_certgen(&config).map_err(|e| e.to_string())?;
    let rows = read_csv(&dir.path().join("results.csv")).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    check(rows.len() == 50, format!("{} rows", rows.len()))?;
    check(rows.iter().all(|r| r.total_ns > 0), "zero timing")?;
    let ratio = summary.ratio.ok_or("no ratio")?;
    let mean = |s: &str| summary.schemes.iter().find(|x| x.scheme == s).map(|x| x.mean_ns / 1e6);
    check(ratio > 1.5, format!("ratio {ratio:.2}"))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "50 rows; mean falcon-1024 {:.1} ms, rsa-2048 {:.1} ms, ratio {ratio:.2}; {elapsed:.2?}",
        mean("falcon-1024").unwrap_or(f64::NAN),
        mean("rsa-2048").unwrap_or(f64::NAN)
    ))
}

fn ac8_heartbeat_cadence() -> Outcome {
    let net = TestNet::start(|_| {});
    let publisher = net.identity("pub-01", Role::Publisher);
    let subscriber = net.identity("sub-01", Role::Subscriber);
    let sub = net.connect(&subscriber).map_err(|e| e.to_string())?;
    let got = Collector::new();
    sub.subscribe(&status_topic("pub-01"), QoS::AtMostOnce, got.handler())
        .map_err(|e| e.to_string())?;

    let mut cfg = PublisherConfig::new(net.client_config("pub-01", net.addr()));
    check(cfg.heartbeat_interval == Duration::from_secs(60), "default heartbeat is not 60 s")?;
    cfg.heartbeat_interval = Duration::from_millis(200);
    let creds = net.ca.credentials(&publisher);
    let clock = net.clock.clone();
    let stop = Arc::new(AtomicBool::new(false));
    let s2 = stop.clone();
    let runner = thread::spawn(move || {
        let mut source = SimulatedPir::from_schedule_ms(&[]);
        run_publisher(&cfg, creds, &mut source, clock, None, &s2)
    });
    thread::sleep(Duration::from_secs(5));
    stop.store(true, Ordering::SeqCst);
    let report = runner.join().map_err(|_| "publisher panicked")?.map_err(|e| e.to_string())?;
    thread::sleep(Duration::from_millis(300));
    let n = got.len();
    sub.disconnect();
    check((23..=27).contains(&n), format!("{n} heartbeats received ({} sent)", report.heartbeats_published))?;
    Ok(format!("{n} heartbeats on status/pub-01 in 5 s at 200 ms"))
}

fn expect_refused(net: &TestNet, result: Result<ClientSession, ClientError>, label: &str) -> Result<(), String> {
    match result {
        Err(ClientError::AuthRejected(ConnectReturnCode::NotAuthorized)) => {}
        Err(e) => return Err(format!("{label}: {e}")),
        Ok(_) => return Err(format!("{label}: connection accepted")),
    }
    check(net.broker.session_count() == 0, format!("{label}: session created"))
}

fn ac9_auth_rejection() -> Outcome {
    let net = TestNet::start(|_| {});
    let two = TwoCaFixture::new(FALCON_1024);

    let foreign = two.foreign.issue("pub-01", Role::Publisher, FALCON_1024);
    let creds = net.ca.credentials(&foreign);
    let cfg = net.client_config("pub-01", net.addr());
    expect_refused(&net, ClientSession::connect(cfg, creds, net.clock.clone()), "foreign CA")?;

    let now = SystemClock.now_secs();
    let expired = net.ca.issue_with_validity("pub-02", Role::Publisher, FALCON_1024, 0, now - 10);
    let cfg = net.client_config("pub-02", net.addr());
    expect_refused(
        &net,
        ClientSession::connect(cfg, net.ca.credentials(&expired), net.clock.clone()),
        "expired certificate",
    )?;

    let valid = net.identity("pub-03", Role::Publisher);
    let cfg = net.client_config("pub-03", net.addr());
    let stale: Arc<dyn Clock> = Arc::new(OffsetClock::new(Arc::new(SystemClock), -120_000));
    expect_refused(&net, ClientSession::connect(cfg, net.ca.credentials(&valid), stale), "stale timestamp")?;

    let ok = net.connect(&valid).map_err(|e| format!("control connection: {e}"))?;
    ok.disconnect();
    Ok("foreign CA, expired certificate, stale timestamp: ConnAck 0x05, no session (3/3)".into())
}

fn ac10_soak() -> Outcome {
    let started = Instant::now();
    let net = TestNet::start(|_| {});
    let mut collectors = Vec::new();
    let mut subs = Vec::new();
    for i in 0..32 {
        let id = net.identity(&format!("sub-{i:02}"), Role::Subscriber);
        let s = net.connect(&id).map_err(|e| e.to_string())?;
        let c = Collector::new();
        s.subscribe("motion-sensor", QoS::AtLeastOnce, c.handler()).map_err(|e| e.to_string())?;
        collectors.push(c);
        subs.push(s);
    }
    let publishers: Vec<_> = (0..4)
        .map(|i| {
            let id = net.identity(&format!("pub-{i:02}"), Role::Publisher);
            net.connect(&id).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    thread::scope(|scope| {
        for p in &publishers {
            scope.spawn(move || {
                for n in 0..250 {
                    p.publish("motion-sensor", format!("{{\"n\":{n}}}").as_bytes(), QoS::AtLeastOnce)
                        .expect("publish");
                }
            });
        }
    });
    for c in &collectors {
        c.wait_for(1000, Duration::from_secs(30));
    }
    let mut failures = 0;
    for (i, (c, s)) in collectors.iter().zip(&subs).enumerate() {
        let msgs = c.messages();
        check(msgs.len() == 1000, format!("subscriber {i} got {}", msgs.len()))?;
        let mut last: HashMap<String, u64> = HashMap::new();
        for m in msgs {
            let prev = last.insert(m.sender_subject.clone(), m.sequence).unwrap_or(0);
            check(m.sequence == prev + 1, format!("subscriber {i}: {} out of order", m.sender_subject))?;
        }
        failures += s.stats().rejected;
    }
    let elapsed = started.elapsed();
    for s in &subs {
        s.disconnect();
    }
    check(failures == 0, format!("{failures} verification failures"))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("32 subscribers x 1000 events from 4 publishers, ordered, 0 failures, {elapsed:.2?}"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("AC1 codec round trip", ac1_codec_round_trip),
        ("AC2 router oracle equivalence", ac2_router_oracle),
        ("AC3 pki properties", ac3_pki_properties),
        ("AC4 end-to-end pipeline", ac4_end_to_end),
        ("AC5 qos under faults", ac5_qos_under_faults),
        ("AC6 tamper gate", ac6_tamper_gate),
        ("AC7 certgen benchmark", ac7_benchmark),
        ("AC8 heartbeat cadence", ac8_heartbeat_cadence),
        ("AC9 auth rejection", ac9_auth_rejection),
        ("AC10 concurrency soak", ac10_soak),
    ];
    let mut failed = Vec::new();
    println!();
    for (name, run) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
