//! Federation over real TCP connections. The server runs one reader thread
//! per connection; readers ack every envelope and forward it to the main
//! loop, which owns the state machine and processes events one at a time.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::messages::{Envelope, Message};
use super::node::{audit_policies, ClientNode, FederationSpec, ServerNode, ServerOutput, Site};
use super::plan::plan_round;
use super::sim_run::{plan_rng, FederationOutcome};
use crate::error::{FedError, Result};
use crate::transport::tcp::{write_envelope, FrameReader, TcpLink};
use crate::transport::{reliable_send, RetryPolicy};
use crate::trustops::{StartupKit, SystemClock, SERVER_ID};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Start once this many clients have registered.
    pub expected_clients: usize,
    pub registration_timeout: Duration,
    pub eval_timeout: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            expected_clients: 1,
            registration_timeout: Duration::from_secs(60),
            eval_timeout: Duration::from_secs(60),
        }
    }
}

enum Inbound {
    Connected(u64, Arc<Mutex<TcpStream>>),
    Envelope(u64, Envelope),
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut next_conn = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let Ok(read_half) = stream.try_clone() else {
                    continue;
                };
                let writer = Arc::new(Mutex::new(stream));
                let conn = next_conn;
                next_conn += 1;
                if tx.send(Inbound::Connected(conn, writer.clone())).is_err() {
                    return;
                }
                let tx = tx.clone();
                thread::spawn(move || read_loop(conn, read_half, writer, tx));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5))
            }
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn read_loop(conn: u64, mut stream: TcpStream, writer: Arc<Mutex<TcpStream>>, tx: Sender<Inbound>) {
    let mut reader = FrameReader::default();
    let mut ack_seq = 0u64;
    loop {
        let env = match reader.read_envelope(&mut stream) {
            Ok(Some(env)) => env,
            Ok(None) => continue,
            Err(_) => return,
        };
        if !matches!(env.message, Message::Ack { .. }) {
            ack_seq += 1;
            let ack = Envelope {
                seq: ack_seq,
                sender: SERVER_ID.to_string(),
                message: Message::Ack { ack_seq: env.seq },
            };
            let mut w = writer.lock().expect("writer lock");
            if write_envelope(&mut w, &ack).is_err() {
                return;
            }
        }
        if tx.send(Inbound::Envelope(conn, env)).is_err() {
            return;
        }
    }
}

struct TcpServer {
    node: ServerNode,
    rx: Receiver<Inbound>,
    conns: BTreeMap<u64, Arc<Mutex<TcpStream>>>,
    site_conn: BTreeMap<String, u64>,
    seq: u64,
    started: Instant,
    outcome: Option<super::node::RoundOutcome>,
    deadline: Option<(u64, Instant)>,
}

impl TcpServer {
    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn send(&mut self, to: &str, message: Message) {
        let Some(stream) = self.site_conn.get(to).and_then(|c| self.conns.get(c)) else {
            return;
        };
        self.seq += 1;
        let env = Envelope {
            seq: self.seq,
            sender: SERVER_ID.to_string(),
            message,
        };
        let mut w = stream.lock().expect("writer lock");
        // A broken connection is a non-response; the deadline handles it.
        let _ = write_envelope(&mut w, &env);
    }

    fn apply(&mut self, out: ServerOutput) {
        for (to, msg) in out.sends {
            self.send(&to, msg);
        }
        if let Some((round, after)) = out.deadline {
            self.deadline = Some((round, Instant::now() + Duration::from_millis(after)));
        }
        if let Some(o) = out.outcome {
            self.deadline = None;
            self.outcome = Some(o);
        }
    }

    fn handle(&mut self, inbound: Inbound) -> Result<()> {
        match inbound {
            Inbound::Connected(conn, stream) => {
                self.conns.insert(conn, stream);
            }
            Inbound::Envelope(conn, env) => {
                if let Message::Register { site_id, .. } = &env.message {
                    self.site_conn.insert(site_id.clone(), conn);
                }
                // Only trust the sender name bound to this connection.
                let bound = self.site_conn.get(&env.sender) == Some(&conn);
                if bound {
                    let now = self.now_ms();
                    let out = self.node.on_message(&env.sender, env.message, now)?;
                    self.apply(out);
                }
            }
        }
        Ok(())
    }

    /// Processes inbound traffic until `done` or `until` passes.
    fn pump(&mut self, until: Option<Instant>, mut done: impl FnMut(&Self) -> bool) -> Result<()> {
        while !done(self) {
            let wake = match (until, self.deadline) {
                (Some(a), Some((_, b))) => Some(a.min(b)),
                (a, b) => a.or(b.map(|(_, t)| t)),
            };
            let got = match wake {
                Some(t) => self
                    .rx
                    .recv_timeout(t.saturating_duration_since(Instant::now())),
                None => self.rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            match got {
                Ok(inbound) => self.handle(inbound)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(FedError::Protocol("listener stopped".into()));
                }
            }
            if let Some((round, at)) = self.deadline {
                if Instant::now() >= at {
                    self.deadline = None;
                    let now = self.now_ms();
                    let out = self.node.on_deadline(round, now)?;
                    self.apply(out);
                }
            }
            if until.is_some_and(|u| Instant::now() >= u) {
                break;
            }
        }
        Ok(())
    }
}

/// Runs the server side of a federation on `listener`. Returns after
/// cross-site evaluation; connections are then closed, which tells clients
/// the job is over.
pub fn serve(
    listener: TcpListener,
    kit: StartupKit,
    spec: &FederationSpec,
    policies: &[Site],
    opts: &ServeOptions,
) -> Result<FederationOutcome> {
    spec.validate()?;
    listener.set_nonblocking(true)?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, tx, stop))
    };

    let mut node = ServerNode::new(
        kit,
        spec.train.zero_params(),
        spec.strategy.clone(),
        Arc::new(SystemClock),
    );
    audit_policies(node.audit_mut(), policies);
    let mut s = TcpServer {
        node,
        rx,
        conns: BTreeMap::new(),
        site_conn: BTreeMap::new(),
        seq: 0,
        started: Instant::now(),
        outcome: None,
        deadline: None,
    };
    let result = drive(&mut s, spec, opts);

    stop.store(true, Ordering::SeqCst);
    for stream in s.conns.values() {
        let _ = stream.lock().expect("writer lock").shutdown(Shutdown::Both);
    }
    let _ = acceptor.join();
    result?;

    let virtual_ms = s.now_ms();
    let (state, audit, evals) = s.node.into_parts();
    Ok(FederationOutcome {
        global: state.global,
        history: state.history,
        evals: evals.into_values().collect(),
        audit,
        trace: Vec::new(),
        virtual_ms,
        client_rejections: Vec::new(),
    })
}

fn drive(s: &mut TcpServer, spec: &FederationSpec, opts: &ServeOptions) -> Result<()> {
    let reg_until = Instant::now() + opts.registration_timeout;
    s.pump(Some(reg_until), |s| {
        s.node.registered().len() >= opts.expected_clients
    })?;
    if s.node.registered().len() < spec.invite {
        return Err(FedError::Protocol(format!(
            "only {} clients registered, need {}",
            s.node.registered().len(),
            spec.invite
        )));
    }

    let mut round = 0u64;
    let mut completed = 0u64;
    let mut consecutive_aborts = 0;
    while completed < spec.rounds {
        let mut plan = plan_round(
            round,
            s.node.registered(),
            spec.invite,
            spec.quorum,
            spec.deadline_ms,
            &mut plan_rng(spec.plan_seed, round),
        )?;
        plan.masked = spec.masked;
        let now = s.now_ms();
        let out = s.node.start_round(plan, now)?;
        s.apply(out);
        s.pump(None, |s| s.outcome.is_some())?;
        let outcome = s.outcome.take().expect("pump ran until an outcome");
        if outcome.completed {
            completed += 1;
            consecutive_aborts = 0;
        } else {
            consecutive_aborts += 1;
            if !spec.abort_retry || consecutive_aborts > 1 {
                return Err(FedError::RoundAborted {
                    round,
                    reason: outcome.reason,
                });
            }
        }
        round += 1;
    }

    let requests = s.node.eval_requests();
    let expected = requests.len();
    for (to, msg) in requests {
        s.send(&to, msg);
    }
    let eval_until = Instant::now() + opts.eval_timeout;
    s.pump(Some(eval_until), |s| s.node.evals().len() >= expected)?;
    s.node.stop();
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ClientReport {
    pub uploads: u64,
    pub evaluated: bool,
    pub rejections: Vec<String>,
}

/// Connects to `addr`, registers, and serves tasks until the server closes
/// the connection.
pub fn run_client(
    kit: StartupKit,
    site: Site,
    spec: FederationSpec,
    addr: &str,
    retry: RetryPolicy,
    connect_timeout: Duration,
) -> Result<ClientReport> {
    let give_up = Instant::now() + connect_timeout;
    let mut link = loop {
        match TcpLink::connect(addr) {
            Ok(link) => break link,
            Err(e) if Instant::now() >= give_up => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    };
    let id = kit.site_id.clone();
    let mut node = ClientNode::new(kit, site, spec);
    let mut inbox = VecDeque::new();
    let mut seq = 0u64;
    let mut next_env = |message: Message| {
        seq += 1;
        Envelope {
            seq,
            sender: id.clone(),
            message,
        }
    };

    let register = next_env(node.register_message());
    reliable_send(&mut link, &register, retry, &mut inbox)?;
    node.registration_acked()?;

    let mut report = ClientReport::default();
    loop {
        let env = match inbox.pop_front() {
            Some(env) => env,
            None => match link.recv(None) {
                Ok(Some(env)) => env,
                Ok(None) => continue,
                Err(FedError::Net(e)) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(FedError::Net(e)) if e.kind() == io::ErrorKind::ConnectionReset => break,
                Err(e) => return Err(e),
            },
        };
        if matches!(env.message, Message::Ack { .. }) {
            continue;
        }
        let is_eval = matches!(env.message, Message::EvalRequest { .. });
        for out in node.on_message(env.message)? {
            let env = next_env(out.message);
            let delivered = reliable_send(&mut link, &env, retry, &mut inbox).is_ok();
            if let Some(round) = out.upload_round {
                node.track_upload(env.seq, round);
                if delivered {
                    report.uploads += 1;
                }
            }
            node.delivery_result(env.seq, delivered)?;
            if is_eval && delivered {
                report.evaluated = true;
            }
        }
        if let Some(reason) = node.refused() {
            return Err(FedError::Auth(reason.to_string()));
        }
    }
    report.rejections = node.rejections().to_vec();
    Ok(report)
}
