//! Remote planner over a line-oriented TCP protocol.
//!
//! The client writes one JSON document per line ([`RemoteRequest`]) and
//! reads one JSON line back ([`RemoteResponse`]): `{"action": "battle",
//! "rationale": "..."}` where `action` is one of `offline`, `battle`, `buy`
//! or `sell`. Connections are kept open and reused. `schema_version` is
//! bumped on any incompatible change.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{ActionDecision, HeuristicPolicy, OutcomeSummary, Policy, PolicyContext, PolicyError};
use crate::domain::{Action, AgentState, Credits, PlayerProfile, SimTime, Uid};
use crate::economy::Channels;
use crate::engine::pool::OutboundPool;

pub const WIRE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub schema_version: u32,
    pub uid: Uid,
    pub step: u64,
    pub day: u32,
    pub step_in_day: u32,
    pub state: AgentState,
    pub balance: Credits,
    pub profile: PlayerProfile,
    pub last_outcomes: Vec<OutcomeSummary>,
    pub recent_actions: Vec<Action>,
    pub channels: Channels,
    pub broadcasts: Vec<String>,
    pub session_steps_remaining: i64,
    pub surplus_tradables: u32,
}

impl RemoteRequest {
    pub fn from_context(ctx: &PolicyContext) -> Self {
        RemoteRequest {
            schema_version: WIRE_SCHEMA_VERSION,
            uid: ctx.profile.uid,
            step: ctx.time.abs_step,
            day: ctx.time.day,
            step_in_day: ctx.time.step_in_day,
            state: ctx.state,
            balance: ctx.balance,
            profile: ctx.profile.clone(),
            last_outcomes: ctx.last_outcomes.clone(),
            recent_actions: ctx.recent_actions.clone(),
            channels: ctx.channels,
            broadcasts: ctx.broadcasts_pending.clone(),
            session_steps_remaining: ctx.session_steps_remaining,
            surplus_tradables: ctx.surplus_tradables,
        }
    }

    pub fn to_context(&self) -> PolicyContext {
        PolicyContext {
            profile: self.profile.clone(),
            state: self.state,
            balance: self.balance,
            last_outcomes: self.last_outcomes.clone(),
            recent_actions: self.recent_actions.clone(),
            broadcasts_pending: self.broadcasts.clone(),
            channels: self.channels,
            time: SimTime {
                day: self.day,
                step_in_day: self.step_in_day,
                abs_step: self.step,
            },
            session_steps_remaining: self.session_steps_remaining,
            surplus_tradables: self.surplus_tradables,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

type Conn = BufReader<TcpStream>;

pub struct RemotePolicy {
    addr: SocketAddr,
    deadline: Duration,
    pool: Arc<OutboundPool>,
    idle: Mutex<Vec<Conn>>,
    fallback: Arc<HeuristicPolicy>,
}

impl RemotePolicy {
    pub fn new(
        endpoint: &str,
        deadline: Duration,
        pool: Arc<OutboundPool>,
        fallback: Arc<HeuristicPolicy>,
    ) -> Result<Self, PolicyError> {
        let addr = endpoint
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| PolicyError::Setup(format!("endpoint {endpoint:?} did not resolve")))?;
        Ok(RemotePolicy {
            addr,
            deadline,
            pool,
            idle: Mutex::new(Vec::new()),
            fallback,
        })
    }

    fn connect(&self) -> Result<Conn, PolicyError> {
        if let Some(c) = self.idle.lock().expect("idle list poisoned").pop() {
            return Ok(c);
        }
        let s = TcpStream::connect_timeout(&self.addr, self.deadline).map_err(io_err)?;
        s.set_nodelay(true).map_err(io_err)?;
        Ok(BufReader::new(s))
    }

    fn exchange(&self, conn: &mut Conn, line: &str, started: Instant) -> Result<String, PolicyError> {
        let left = |now: Instant| {
            self.deadline
                .checked_sub(now - started)
                .filter(|d| !d.is_zero())
                .ok_or(PolicyError::Timeout)
        };
        conn.get_ref().set_write_timeout(Some(left(Instant::now())?)).map_err(io_err)?;
        conn.get_mut().write_all(line.as_bytes()).map_err(io_err)?;
        conn.get_ref().set_read_timeout(Some(left(Instant::now())?)).map_err(io_err)?;
        let mut buf = String::new();
        let n = conn.read_line(&mut buf).map_err(io_err)?;
        if n == 0 {
            return Err(PolicyError::MalformedResponse("connection closed".into()));
        }
        Ok(buf)
    }
}

fn io_err(e: std::io::Error) -> PolicyError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => PolicyError::Timeout,
        _ => PolicyError::Transport(e.to_string()),
    }
}

/// Parses a response line into a decision.
pub fn parse_response(line: &str) -> Result<ActionDecision, PolicyError> {
    let r: RemoteResponse = serde_json::from_str(line.trim()).map_err(|e| PolicyError::MalformedResponse(e.to_string()))?;
    let action = r
        .action
        .parse::<Action>()
        .map_err(|_| PolicyError::UnknownAction(r.action.clone()))?;
    Ok(ActionDecision {
        action,
        rationale: r.rationale,
        latency_ms: 0.0,
    })
}

impl Policy for RemotePolicy {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn decide(&self, ctx: &PolicyContext, _rng: &mut dyn RngCore) -> Result<ActionDecision, PolicyError> {
        let _lease = self.pool.acquire()?;
        let started = Instant::now();
        let mut line = serde_json::to_string(&RemoteRequest::from_context(ctx)).expect("request serializes");
        line.push('\n');
        let mut conn = self.connect()?;
        let reply = self.exchange(&mut conn, &line, started)?;
        let decision = parse_response(&reply)?;
        self.idle.lock().expect("idle list poisoned").push(conn);
        Ok(decision)
    }

    fn fallback(&self, ctx: &PolicyContext, rng: &mut dyn RngCore) -> ActionDecision {
        let mut d = self
            .fallback
            .decide(ctx, rng)
            .expect("heuristic policy is infallible");
        d.rationale = d.rationale.map(|r| format!("{r} (remote fallback)"));
        d
    }
}

/// What a [`StubPolicyServer`] sends back for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct StubReply {
    pub line: String,
    pub delay: Duration,
}

impl StubReply {
    pub fn action(action: &str) -> Self {
        Self::raw(format!("{{\"action\":\"{action}\",\"rationale\":\"stub\"}}"))
    }

    pub fn raw(line: impl Into<String>) -> Self {
        StubReply {
            line: line.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

type Handler = dyn Fn(&RemoteRequest) -> StubReply + Send + Sync;

#[derive(Default)]
struct StubStats {
    served: AtomicU64,
    active: AtomicUsize,
    max_active: AtomicUsize,
    connections: AtomicU64,
}

/// In-process remote planner for tests and demos. Each connection gets its
/// own thread; requests on a connection are answered in order.
pub struct StubPolicyServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<StubStats>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl StubPolicyServer {
    pub fn spawn(handler: impl Fn(&RemoteRequest) -> StubReply + Send + Sync + 'static) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(StubStats::default());
        let streams: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let (stop, stats, streams) = (stop.clone(), stats.clone(), streams.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    if let Ok(c) = conn.try_clone() {
                        streams.lock().expect("stream list poisoned").push(c);
                    }
                    stats.connections.fetch_add(1, Ordering::SeqCst);
                    let (stats, handler) = (stats.clone(), handler.clone());
                    std::thread::spawn(move || serve_connection(conn, &*handler, &stats));
                }
            })
        };
        Ok(StubPolicyServer {
            addr,
            stop,
            stats,
            streams,
            accept: Some(accept),
        })
    }

    /// Answers every request with the same action.
    pub fn constant(action: Action) -> std::io::Result<Self> {
        let name = action.as_str();
        Self::spawn(move |_| StubReply::action(name))
    }

    /// Answers with the greedy choice of the given heuristic on the request's
    /// own context, so a remote half of a population behaves plausibly.
    pub fn greedy(policy: Arc<HeuristicPolicy>, delay: Duration) -> std::io::Result<Self> {
        Self::spawn(move |req| {
            let ctx = req.to_context();
            let probs = policy.probabilities(&ctx);
            let best = (0..4).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a))).unwrap_or(0);
            StubReply::action(Action::ALL[best].as_str()).delayed(delay)
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn requests_served(&self) -> u64 {
        self.stats.served.load(Ordering::SeqCst)
    }

    /// Largest number of requests being handled at the same time.
    pub fn max_concurrent(&self) -> usize {
        self.stats.max_active.load(Ordering::SeqCst)
    }

    pub fn connections(&self) -> u64 {
        self.stats.connections.load(Ordering::SeqCst)
    }
}

fn serve_connection(conn: TcpStream, handler: &Handler, stats: &StubStats) {
    let Ok(mut writer) = conn.try_clone() else { return };
    let mut reader = BufReader::new(conn);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let now = stats.active.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_active.fetch_max(now, Ordering::SeqCst);
        let reply = match serde_json::from_str::<RemoteRequest>(line.trim()) {
            Ok(req) => handler(&req),
            Err(e) => StubReply::raw(format!("{{\"error\":{:?}}}", e.to_string())),
        };
        if !reply.delay.is_zero() {
            std::thread::sleep(reply.delay);
        }
        stats.active.fetch_sub(1, Ordering::SeqCst);
        stats.served.fetch_add(1, Ordering::SeqCst);
        let mut out = reply.line;
        out.push('\n');
        if writer.write_all(out.as_bytes()).is_err() {
            return;
        }
    }
}

impl Drop for StubPolicyServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        for s in self.streams.lock().expect("stream list poisoned").drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::HeuristicWeights;
    use super::*;
    use crate::domain::ProfileClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn client(server: &StubPolicyServer, deadline_ms: u64, pool: Arc<OutboundPool>) -> RemotePolicy {
        let h = Arc::new(HeuristicPolicy::new(HeuristicWeights::default(), 60));
        RemotePolicy::new(&server.endpoint(), Duration::from_millis(deadline_ms), pool, h).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn echo_battle() {
        let s = StubPolicyServer::constant(Action::Battle).unwrap();
        let p = client(&s, 2000, OutboundPool::new(4));
        let ctx = context(ProfileClass::Novice);
        for _ in 0..3 {
            assert_eq!(p.decide(&ctx, &mut rng()).unwrap().action, Action::Battle);
        }
        assert_eq!(s.requests_served(), 3);
        assert_eq!(s.connections(), 1, "connection reused");
    }

    #[test]
    fn unknown_action_is_reported() {
        let s = StubPolicyServer::spawn(|_| StubReply::action("dance")).unwrap();
        let p = client(&s, 2000, OutboundPool::new(1));
        let ctx = context(ProfileClass::Novice);
        assert_eq!(p.decide(&ctx, &mut rng()), Err(PolicyError::UnknownAction("dance".into())));
        let d = p.fallback(&ctx, &mut rng());
        assert!(d.rationale.unwrap().ends_with("(remote fallback)"));
    }

    #[test]
    fn malformed_response() {
        let s = StubPolicyServer::spawn(|_| StubReply::raw("not json")).unwrap();
        let p = client(&s, 2000, OutboundPool::new(1));
        assert!(matches!(
            p.decide(&context(ProfileClass::Casual), &mut rng()),
            Err(PolicyError::MalformedResponse(_))
        ));
    }

    #[test]
    fn slow_server_times_out() {
        let s = StubPolicyServer::spawn(|_| StubReply::action("buy").delayed(Duration::from_millis(400))).unwrap();
        let p = client(&s, 100, OutboundPool::new(1));
        let started = Instant::now();
        assert_eq!(p.decide(&context(ProfileClass::Casual), &mut rng()), Err(PolicyError::Timeout));
        assert!(started.elapsed() < Duration::from_millis(380));
    }

    #[test]
    fn request_round_trips_context() {
        let mut ctx = context(ProfileClass::HighSkill);
        ctx.last_outcomes = vec![outcome(false)];
        ctx.recent_actions = vec![Action::Battle];
        ctx.broadcasts_pending = vec!["black market open".into()];
        let req = RemoteRequest::from_context(&ctx);
        let text = serde_json::to_string(&req).unwrap();
        let back: RemoteRequest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_context(), ctx);
        assert_eq!(back.schema_version, WIRE_SCHEMA_VERSION);
    }

    #[test]
    fn closed_pool_is_an_error() {
        let s = StubPolicyServer::constant(Action::Battle).unwrap();
        let pool = OutboundPool::new(1);
        let p = client(&s, 2000, pool.clone());
        pool.close();
        assert!(matches!(p.decide(&context(ProfileClass::Casual), &mut rng()), Err(PolicyError::Pool(_))));
    }
}
