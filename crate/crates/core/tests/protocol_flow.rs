//! Head and worker state machines driven by hand-written transcripts, the
//! simulated network against an event-list oracle, and whole runs over both
//! transports.

use std::collections::VecDeque;
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use detach::aaps::SyncRule;
use detach::cli::{run_detailed, RunConfig, TransportKind};
use detach::envs::EnvKind;
use detach::learner::PpoConfig;
use detach::protocol::head::{HeadConfig, HeadNode};
use detach::protocol::sim::{LatencyModel, Side, SimNetwork};
use detach::protocol::tcp::{serve_head, TcpEndpoint};
use detach::protocol::wire::{decode_message, encode_message, weight_response_size};
use detach::protocol::{worker_loop, Endpoint, Message, WorkerNode};
use detach::rng::RngState;
use detach::types::{Layout, ParameterSet};
use detach::Error;

fn weights(kind: EnvKind, version: u64) -> Message {
    let mut p = ParameterSet::zeros(kind.layout());
    p.version = version;
    Message::WeightResponse(p)
}

fn ack(stale: bool) -> Message {
    Message::Ack {
        stale,
        learner_version: 0,
    }
}

fn transition_versions(msgs: &[Message]) -> Vec<(u32, u64)> {
    msgs.iter()
        .map(|m| match m {
            Message::Transition(t) => (t.env_index, t.behavior_version),
            other => panic!("expected a transition, got {other:?}"),
        })
        .collect()
}

#[test]
fn worker_transcript() {
    let kind = EnvKind::GridWorld(3);
    let mut w = WorkerNode::new(0, kind, 2, &RngState::new(1)).unwrap();
    assert_eq!(
        w.hello(),
        Message::Hello {
            worker_id: 0,
            env_count: 2
        }
    );

    assert!(w.handle(weights(kind, 0)).unwrap().is_empty());
    let out = w.handle(Message::Reset).unwrap();
    assert_eq!(transition_versions(&out), vec![(0, 0), (1, 0)]);

    // One Ack is not enough; the second releases the next step.
    assert!(w.handle(ack(false)).unwrap().is_empty());
    let out = w.handle(ack(false)).unwrap();
    assert_eq!(transition_versions(&out), vec![(0, 0), (1, 0)]);

    // A stale flag on either Ack turns the step into a pull.
    assert!(w.handle(ack(true)).unwrap().is_empty());
    assert_eq!(w.handle(ack(false)).unwrap(), vec![Message::WeightRequest]);
    let out = w.handle(weights(kind, 3)).unwrap();
    assert_eq!(transition_versions(&out), vec![(0, 3), (1, 3)]);

    assert!(w.handle(Message::Shutdown).unwrap().is_empty());
    assert!(w.is_finished());
    assert!(matches!(w.handle(ack(false)), Err(Error::Protocol(_))));

    let r = w.report();
    assert_eq!(r.transitions_sent, 6);
    assert_eq!(r.weight_requests_sent, 1);
    assert_eq!(r.weight_responses_received, 2);
    assert_eq!(r.final_version, 3);
}

#[test]
fn worker_finishes_outstanding_pull_after_shutdown() {
    let kind = EnvKind::GridWorld(3);
    let mut w = WorkerNode::new(4, kind, 1, &RngState::new(2)).unwrap();
    w.handle(weights(kind, 0)).unwrap();
    w.handle(Message::Reset).unwrap();
    assert_eq!(w.handle(ack(true)).unwrap(), vec![Message::WeightRequest]);
    assert!(w.handle(Message::Shutdown).unwrap().is_empty());
    assert!(!w.is_finished());
    // The answer to the pull arrives, but no further steps are taken.
    assert!(w.handle(weights(kind, 1)).unwrap().is_empty());
    assert!(w.is_finished());
    assert_eq!(w.report().weight_responses_received, 2);
}

#[test]
fn worker_rejects_out_of_order_messages() {
    let kind = EnvKind::CartPole;
    let fresh = || WorkerNode::new(0, kind, 1, &RngState::new(3)).unwrap();
    assert!(fresh().handle(Message::Reset).is_err());
    assert!(fresh().handle(ack(false)).is_err());
    assert!(fresh().handle(Message::WeightRequest).is_err());
    assert!(fresh().handle(weights(EnvKind::GridWorld(2), 0)).is_err());

    let mut w = fresh();
    w.handle(weights(kind, 5)).unwrap();
    w.handle(Message::Reset).unwrap();
    // Weights nobody asked for.
    assert!(w.handle(weights(kind, 6)).is_err());

    let mut w = fresh();
    w.handle(weights(kind, 5)).unwrap();
    w.handle(Message::Reset).unwrap();
    w.handle(ack(true)).unwrap();
    // A version older than the cached one.
    assert!(w.handle(weights(kind, 4)).is_err());
}

/// Endpoint that replays a fixed inbox and records what was sent.
struct Scripted {
    inbox: VecDeque<Message>,
    sent: Vec<Message>,
}

impl Endpoint for Scripted {
    fn send(&mut self, frame: &[u8]) -> detach::Result<()> {
        self.sent.push(decode_message(frame)?);
        Ok(())
    }

    fn recv(&mut self) -> detach::Result<Vec<u8>> {
        let msg = self
            .inbox
            .pop_front()
            .ok_or_else(|| Error::Transport("script exhausted".into()))?;
        encode_message(&msg)
    }
}

#[test]
fn worker_loop_over_scripted_endpoint() {
    let kind = EnvKind::CartPole;
    let mut ep = Scripted {
        inbox: VecDeque::from(vec![
            weights(kind, 0),
            Message::Reset,
            ack(false),
            ack(true),
            weights(kind, 1),
            ack(false),
            Message::Shutdown,
        ]),
        sent: Vec::new(),
    };
    let node = WorkerNode::new(7, kind, 1, &RngState::new(4)).unwrap();
    let report = worker_loop(&mut ep, node).unwrap();
    let names: Vec<&str> = ep.sent.iter().map(Message::name).collect();
    assert_eq!(
        names,
        [
            "Hello",
            "Transition",
            "Transition",
            "WeightRequest",
            "Transition",
            "Transition"
        ]
    );
    let versions: Vec<u64> = ep
        .sent
        .iter()
        .filter_map(|m| match m {
            Message::Transition(t) => Some(t.behavior_version),
            _ => None,
        })
        .collect();
    assert_eq!(versions, [0, 0, 1, 1]);
    assert_eq!(report.transitions_sent, 4);
    assert!(ep.inbox.is_empty());

    // A connection that dies mid-run is an error, not a hang.
    let mut ep = Scripted {
        inbox: VecDeque::from(vec![weights(kind, 0), Message::Reset]),
        sent: Vec::new(),
    };
    let node = WorkerNode::new(7, kind, 1, &RngState::new(4)).unwrap();
    assert!(worker_loop(&mut ep, node).is_err());
}

/// Delivery-time oracle: every frame is due at `max(now + latency, previous
/// frame due in the same direction of the same link)`; ties go to the
/// earlier send.
#[test]
fn sim_network_matches_event_list_oracle() {
    let latencies = [7u64, 2, 0, 13];
    let mut rng = RngState::new(9);
    for trial in 0..20 {
        let mut net = SimNetwork::new(trial, LatencyModel::Fixed(1));
        let conns: Vec<usize> = latencies
            .iter()
            .map(|&l| net.connect_with(LatencyModel::Fixed(l)))
            .collect();
        // (due, seq, conn, side, payload)
        let mut pending: Vec<(u64, u64, usize, Side, u32)> = Vec::new();
        let mut last = [[0u64; 2]; 4];
        let mut now = 0u64;
        let mut seq = 0u64;
        let mut label = 0u32;
        for _ in 0..300 {
            if pending.is_empty() || rng.uniform() < 0.6 {
                let link = rng.below(4) as usize;
                let side = if rng.uniform() < 0.5 {
                    Side::Head
                } else {
                    Side::Worker
                };
                let dir = usize::from(side == Side::Worker);
                let due = (now + latencies[link]).max(last[link][dir]);
                last[link][dir] = due;
                pending.push((due, seq, conns[link], side, label));
                net.send(conns[link], side, label.to_le_bytes().to_vec())
                    .unwrap();
                seq += 1;
                label += 1;
            } else {
                let (i, _) = pending
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, p)| (p.0, p.1))
                    .unwrap();
                let (due, _, conn, side, payload) = pending.remove(i);
                let d = net.next_delivery().unwrap();
                now = due;
                assert_eq!((d.time, d.conn, d.to), (due, conn, side));
                assert_eq!(d.frame, payload.to_le_bytes().to_vec());
                assert_eq!(net.now(), due);
            }
        }
    }
}

fn head_config(workers: usize, sync_rule: SyncRule) -> HeadConfig {
    HeadConfig {
        env: EnvKind::GridWorld(3),
        workers,
        ppo: PpoConfig {
            steps_per_rollout: 8,
            minibatches: 2,
            ..PpoConfig::default()
        },
        sync_rule,
        kl_decay: 0.95,
        total_timesteps: 1_000,
        rng: RngState::new(0),
    }
}

#[test]
fn head_rejects_bad_setups_and_peers() {
    let rule = SyncRule::divergence(0.05).unwrap();
    assert!(matches!(
        HeadNode::new(head_config(0, rule)),
        Err(Error::Config(_))
    ));
    assert!(SyncRule::divergence(0.0).is_err());

    let mut head = HeadNode::new(head_config(2, rule)).unwrap();
    // Nothing but Hello is accepted from a stranger.
    assert!(matches!(
        head.handle(9, Message::WeightRequest, 0),
        Err(Error::Protocol(_))
    ));
    assert!(head
        .handle(
            0,
            Message::Hello {
                worker_id: 0,
                env_count: 1
            },
            0
        )
        .unwrap()
        .is_empty());
    assert!(head
        .handle(
            0,
            Message::Hello {
                worker_id: 1,
                env_count: 1
            },
            0
        )
        .is_err());
    assert!(head
        .handle(
            1,
            Message::Hello {
                worker_id: 0,
                env_count: 1
            },
            0
        )
        .is_err());
    assert!(head.handle(1, ack(false), 0).is_err());

    // The second worker completes the handshake: weights then Reset to each.
    let out = head
        .handle(
            1,
            Message::Hello {
                worker_id: 1,
                env_count: 1,
            },
            0,
        )
        .unwrap();
    let shape: Vec<(usize, &str)> = out.iter().map(|(c, m)| (*c, m.name())).collect();
    assert_eq!(
        shape,
        [
            (0, "WeightResponse"),
            (0, "Reset"),
            (1, "WeightResponse"),
            (1, "Reset")
        ]
    );
    assert!(head
        .handle(
            2,
            Message::Hello {
                worker_id: 2,
                env_count: 1
            },
            0
        )
        .is_err());
}

#[test]
fn head_rejects_transitions_with_the_wrong_version() {
    let kind = EnvKind::GridWorld(3);
    let mut head = HeadNode::new(head_config(1, SyncRule::divergence(0.05).unwrap())).unwrap();
    head.handle(
        0,
        Message::Hello {
            worker_id: 0,
            env_count: 1,
        },
        0,
    )
    .unwrap();
    let mut w = WorkerNode::new(0, kind, 1, &RngState::new(1)).unwrap();
    w.handle(weights(kind, 0)).unwrap();
    let out = w.handle(Message::Reset).unwrap();
    let Message::Transition(mut t) = out[0].clone() else {
        panic!()
    };
    t.behavior_version = 3;
    assert!(matches!(
        head.handle(0, Message::Transition(t), 1),
        Err(Error::Protocol(_))
    ));
}

fn grid_run(
    workers: usize,
    kl_threshold: f64,
    force_sync: bool,
    dir: &std::path::Path,
) -> RunConfig {
    RunConfig {
        env: EnvKind::GridWorld(4),
        workers,
        envs_per_worker: 3,
        kl_threshold,
        force_sync,
        total_timesteps: 6_000,
        seed: 17,
        ppo: PpoConfig {
            learning_rate: 0.05,
            steps_per_rollout: 32,
            minibatches: 4,
            ..PpoConfig::default()
        },
        metrics_path: dir.join(format!("grid_{workers}_{kl_threshold:e}_{force_sync}.csv")),
        ..RunConfig::default()
    }
}

#[test]
fn infinite_threshold_never_syncs() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_detailed(&grid_run(1, 1e300, false, dir.path())).unwrap();
    assert!(outcome.head.updates > 0);
    assert_eq!(outcome.summary.sync_counts, vec![0]);
    assert_eq!(outcome.workers[0].final_version, 0);
    assert_eq!(outcome.workers[0].weight_responses_received, 1);
}

#[test]
fn weight_bytes_count_every_response() {
    assert_eq!(weight_response_size(Layout::new(4, 2)), 149);
    let dir = tempfile::tempdir().unwrap();
    for (workers, threshold, force) in [(1, 0.05, true), (3, 0.001, false), (2, 0.3, false)] {
        let config = grid_run(workers, threshold, force, dir.path());
        let outcome = run_detailed(&config).unwrap();
        let size = weight_response_size(config.env.layout()) as u64;
        let responses = outcome.summary.total_syncs() + workers as u64;
        assert_eq!(outcome.summary.weight_bytes, responses * size);
        let received: u64 = outcome
            .workers
            .iter()
            .map(|w| w.weight_responses_received)
            .sum();
        assert_eq!(received, responses);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = grid_run(3, 0.01, false, dir.path());
    a.latency = LatencyModel::Uniform { min: 1, max: 9 };
    let mut b = a.clone();
    b.metrics_path = dir.path().join("again.csv");
    let ra = run_detailed(&a).unwrap();
    let rb = run_detailed(&b).unwrap();
    assert_eq!(ra.final_params, rb.final_params);
    assert_eq!(ra.summary, rb.summary);
    assert_eq!(
        std::fs::read(&a.metrics_path).unwrap(),
        std::fs::read(&b.metrics_path).unwrap()
    );

    let mut c = a.clone();
    c.seed += 1;
    c.metrics_path = dir.path().join("other.csv");
    assert_ne!(run_detailed(&c).unwrap().final_params, ra.final_params);
}

#[test]
fn single_worker_tcp_matches_sim() {
    // One connection means one FIFO stream, so the head sees the same
    // message sequence under either transport.
    let dir = tempfile::tempdir().unwrap();
    let sim = grid_run(1, 0.01, false, dir.path());
    let mut tcp = sim.clone();
    tcp.transport = TransportKind::Tcp;
    tcp.metrics_path = dir.path().join("tcp.csv");
    let a = run_detailed(&sim).unwrap();
    let b = run_detailed(&tcp).unwrap();
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.summary.sync_counts, b.summary.sync_counts);
    assert_eq!(a.workers, b.workers);
}

#[test]
fn tcp_threads_and_processes_conserve_requests() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = grid_run(3, 0.01, false, dir.path());
    config.transport = TransportKind::Tcp;
    for exe in [None, Some(env!("CARGO_BIN_EXE_detach").into())] {
        config.worker_exe = exe;
        let outcome = run_detailed(&config).unwrap();
        assert!(outcome.head.global_steps >= config.total_timesteps);
        assert_eq!(outcome.summary.sync_counts.len(), 3);
        for w in &outcome.head.workers {
            assert_eq!(w.weight_requests + 1, w.weight_responses);
            assert_eq!(w.sync_count + 1, w.weight_responses);
        }
    }
}

#[test]
fn tcp_disconnect_is_reported() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let client = thread::spawn(move || {
        let mut ep = TcpEndpoint::connect(addr, Duration::from_secs(5)).unwrap();
        ep.send(
            &encode_message(&Message::Hello {
                worker_id: 0,
                env_count: 1,
            })
            .unwrap(),
        )
        .unwrap();
        // Read the handshake, then vanish.
        ep.recv().unwrap();
    });
    let mut head = HeadNode::new(head_config(1, SyncRule::divergence(0.05).unwrap())).unwrap();
    let err = serve_head(&listener, &mut head, 1).unwrap_err();
    client.join().unwrap();
    assert!(err.to_string().contains("worker 0"), "{err}");
}
