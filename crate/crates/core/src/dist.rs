//! Distributed posterior and prediction passes over a set of nodes.
//!
//! Leaves are dealt to nodes in contiguous depth-first blocks. The state of an
//! internal region lives on the lowest-numbered node that holds one of its
//! children (the supervisor); every other node holding a child is a worker
//! and ships its child summaries to the supervisor. Supervisors merge child
//! summaries in child order, so results are bitwise equal to the serial pass.
//!
//! # Wire format
//!
//! Every message is one frame, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "NSMR"
//!      4     1  version (1)
//!      5     1  kind (1 summary, 2 chain, 3 prediction)
//!      6     4  region level
//!     10     4  region index
//!     14     4  sender node
//!     18     8  payload length
//!     26     4  CRC32 of the payload
//!     30     …  payload (codec encoding)
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::codec::{Decoder, Encoder};
use crate::covariance::KernelSpec;
use crate::error::{Error, Result};
use crate::geo::LonLat;
use crate::mra::{
    integrate_region, leaf_step, leaf_values, predict, region_mean, PredictOptions, PredictionField, Posterior, Prior,
    RegionPosterior, Summary,
};
use crate::partition::{RegionId, RegionTree};

pub type NodeId = u32;

pub const MAGIC: [u8; 4] = *b"NSMR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;

/// How one node takes part in the step of one internal region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// All children are on this node.
    Local,
    /// Receives child summaries from workers.
    Supervisor,
    /// Sends its child summaries to the supervisor.
    Worker,
    Inactive,
}

/// Synchronization requirement of an internal region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RegionRole {
    Local(NodeId),
    Sync { supervisor: NodeId, workers: Vec<NodeId> },
}

impl RegionRole {
    pub fn holder(&self) -> NodeId {
        match self {
            RegionRole::Local(n) => *n,
            RegionRole::Sync { supervisor, .. } => *supervisor,
        }
    }
}

/// Assignment of regions to nodes with the induced synchronization roles.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionPlan {
    n_nodes: usize,
    depth: usize,
    leaf_owner: HashMap<RegionId, NodeId>,
    roles: HashMap<RegionId, RegionRole>,
    /// Internal regions by level, index order.
    internal: Vec<Vec<RegionId>>,
}

/// Splits the leaves into contiguous depth-first blocks and derives roles.
pub fn make_plan(tree: &RegionTree, n_nodes: usize) -> Result<ExecutionPlan> {
    let leaves = tree.leaves_dfs();
    if n_nodes == 0 {
        return Err(Error::invalid("node count must be at least 1"));
    }
    if n_nodes > leaves.len() {
        return Err(Error::invalid(format!(
            "{n_nodes} nodes requested but the tree has only {} leaves",
            leaves.len()
        )));
    }
    let base = leaves.len() / n_nodes;
    let extra = leaves.len() % n_nodes;
    let mut leaf_owner = HashMap::new();
    let mut it = leaves.iter();
    for node in 0..n_nodes {
        let count = base + usize::from(node < extra);
        for leaf in it.by_ref().take(count) {
            leaf_owner.insert(*leaf, node as NodeId);
        }
    }
    let mut holder: HashMap<RegionId, NodeId> = leaf_owner.clone();
    let mut roles = HashMap::new();
    let mut internal = vec![Vec::new(); tree.depth()];
    for m in (1..=tree.depth() as u32).rev() {
        for reg in tree.level(m).iter().filter(|r| !r.is_leaf()) {
            let holders: BTreeSet<NodeId> = reg.children.iter().map(|c| holder[c]).collect();
            let supervisor = *holders.iter().next().expect("internal region has children");
            let role = if holders.len() == 1 {
                RegionRole::Local(supervisor)
            } else {
                RegionRole::Sync {
                    supervisor,
                    workers: holders.into_iter().skip(1).collect(),
                }
            };
            holder.insert(reg.id, supervisor);
            roles.insert(reg.id, role);
            internal[m as usize - 1].push(reg.id);
        }
    }
    Ok(ExecutionPlan {
        n_nodes,
        depth: tree.depth(),
        leaf_owner,
        roles,
        internal,
    })
}

impl ExecutionPlan {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn leaf_owner(&self, leaf: RegionId) -> Option<NodeId> {
        self.leaf_owner.get(&leaf).copied()
    }

    /// Leaves per node.
    pub fn leaf_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_nodes];
        for n in self.leaf_owner.values() {
            c[*n as usize] += 1;
        }
        c
    }

    pub fn region_role(&self, id: RegionId) -> Option<&RegionRole> {
        self.roles.get(&id)
    }

    /// Node holding the state of a region (leaf owner or supervisor).
    pub fn holder(&self, id: RegionId) -> Option<NodeId> {
        self.leaf_owner
            .get(&id)
            .copied()
            .or_else(|| self.roles.get(&id).map(RegionRole::holder))
    }

    pub fn role(&self, id: RegionId, node: NodeId) -> Role {
        match self.roles.get(&id) {
            Some(RegionRole::Local(n)) if *n == node => Role::Local,
            Some(RegionRole::Sync { supervisor, .. }) if *supervisor == node => Role::Supervisor,
            Some(RegionRole::Sync { workers, .. }) if workers.contains(&node) => Role::Worker,
            _ => Role::Inactive,
        }
    }

    pub fn internal_regions(&self, level: u32) -> &[RegionId] {
        &self.internal[level as usize - 1]
    }

    /// Regions whose state `node` computes: owned leaves plus internal
    /// regions where it is local or supervisor.
    pub fn working_set(&self, node: NodeId) -> Vec<RegionId> {
        let mut out: Vec<RegionId> = self
            .leaf_owner
            .iter()
            .filter(|(_, n)| **n == node)
            .map(|(id, _)| *id)
            .chain(self.roles.iter().filter(|(_, r)| r.holder() == node).map(|(id, _)| *id))
            .collect();
        out.sort();
        out
    }

    /// Every (region, worker) pair; one message each way per pair.
    pub fn sync_pairs(&self) -> Vec<(RegionId, NodeId)> {
        let mut out: Vec<(RegionId, NodeId)> = self
            .roles
            .iter()
            .flat_map(|(id, r)| match r {
                RegionRole::Local(_) => Vec::new(),
                RegionRole::Sync { workers, .. } => workers.iter().map(|w| (*id, *w)).collect(),
            })
            .collect();
        out.sort();
        out
    }

    /// Number of bulk-synchronous level steps of the posterior pass.
    pub fn level_steps(&self) -> usize {
        self.depth.saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Summary = 1,
    Chain = 2,
    Prediction = 3,
}

impl MessageKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(MessageKind::Summary),
            2 => Ok(MessageKind::Chain),
            3 => Ok(MessageKind::Prediction),
            _ => Err(Error::Transport(format!("unknown message kind {v}"))),
        }
    }
}

/// One framed message.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub kind: MessageKind,
    pub region: RegionId,
    pub sender: NodeId,
    pub payload: Vec<u8>,
}

/// Identity of an expected message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageKey {
    pub kind: MessageKind,
    pub region: RegionId,
    pub sender: NodeId,
}

impl Frame {
    pub fn key(&self) -> MessageKey {
        MessageKey {
            kind: self.kind,
            region: self.region,
            sender: self.sender,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.region.level.to_le_bytes());
        out.extend_from_slice(&self.region.index.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Payload length announced by a header.
    pub fn payload_len(header: &[u8]) -> Result<usize> {
        check_header(header)?;
        Ok(u64::from_le_bytes(header[18..26].try_into().expect("8 bytes")) as usize)
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Transport(format!("frame of {} bytes is shorter than its header", bytes.len())));
        }
        let len = Frame::payload_len(&bytes[..HEADER_LEN])?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::Transport(format!(
                "frame announces {len} payload bytes but carries {}",
                payload.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let region = RegionId::new(u32_at(6), u32_at(10));
        let crc = u32_at(26);
        if crc32fast::hash(payload) != crc {
            return Err(Error::Transport(format!("checksum mismatch in message for region {region}")));
        }
        Ok(Frame {
            kind: MessageKind::from_u8(bytes[5])?,
            region,
            sender: u32_at(14),
            payload: payload.to_vec(),
        })
    }
}

fn check_header(h: &[u8]) -> Result<()> {
    if h.len() < HEADER_LEN || h[..4] != MAGIC {
        return Err(Error::Transport("bad frame magic".into()));
    }
    if h[4] != VERSION {
        return Err(Error::Transport(format!("unsupported frame version {}", h[4])));
    }
    Ok(())
}

/// Point-to-point byte transport between numbered nodes.
pub trait Transport: Send {
    fn rank(&self) -> NodeId;
    fn n_nodes(&self) -> usize;
    /// Sends one encoded frame.
    fn send(&mut self, to: NodeId, frame: Vec<u8>) -> Result<()>;
    /// Next encoded frame addressed to this node, or `None` on timeout.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>>;
}

/// In-process transport over channels.
pub struct Loopback {
    rank: NodeId,
    peers: Vec<Sender<Vec<u8>>>,
    inbox: Receiver<Vec<u8>>,
}

/// One connected loopback endpoint per node.
pub fn loopback(n_nodes: usize) -> Vec<Loopback> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..n_nodes).map(|_| channel()).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(i, inbox)| Loopback {
            rank: i as NodeId,
            peers: txs.clone(),
            inbox,
        })
        .collect()
}

impl Transport for Loopback {
    fn rank(&self) -> NodeId {
        self.rank
    }

    fn n_nodes(&self) -> usize {
        self.peers.len()
    }

    fn send(&mut self, to: NodeId, frame: Vec<u8>) -> Result<()> {
        self.peers
            .get(to as usize)
            .ok_or_else(|| Error::Transport(format!("no node {to}")))?
            .send(frame)
            .map_err(|_| Error::Transport(format!("node {to} has shut down")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            // Peers may exit once done; keep waiting out the timeout.
            Err(RecvTimeoutError::Disconnected) => {
                thread::sleep(timeout);
                Ok(None)
            }
        }
    }
}

/// Fault injection around another transport.
pub struct Faulty<T: Transport> {
    inner: T,
    /// Sends allowed before the node goes silent.
    pub crash_after: Option<usize>,
    /// Flips a payload byte of every outgoing frame.
    pub corrupt: bool,
    sent: usize,
}

impl<T: Transport> Faulty<T> {
    pub fn new(inner: T) -> Self {
        Faulty {
            inner,
            crash_after: None,
            corrupt: false,
            sent: 0,
        }
    }
}

impl<T: Transport> Transport for Faulty<T> {
    fn rank(&self) -> NodeId {
        self.inner.rank()
    }

    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    fn send(&mut self, to: NodeId, mut frame: Vec<u8>) -> Result<()> {
        if self.crash_after.is_some_and(|k| self.sent >= k) {
            return Ok(());
        }
        self.sent += 1;
        if self.corrupt && frame.len() > HEADER_LEN {
            frame[HEADER_LEN] ^= 0xff;
        }
        self.inner.send(to, frame)
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        self.inner.recv(timeout)
    }
}

/// TCP transport: one listening socket per node, connections opened lazily.
pub struct TcpTransport {
    rank: NodeId,
    addrs: Vec<SocketAddr>,
    conns: HashMap<NodeId, TcpStream>,
    inbox: Receiver<Result<Vec<u8>>>,
    connect_timeout: Duration,
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = Frame::payload_len(&header)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let mut buf = header.to_vec();
    buf.resize(HEADER_LEN + len, 0);
    stream.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(Some(buf))
}

impl TcpTransport {
    /// Binds the listening endpoint of `rank` from the address list.
    pub fn bind(rank: NodeId, addrs: Vec<SocketAddr>, connect_timeout: Duration) -> Result<Self> {
        let addr = *addrs
            .get(rank as usize)
            .ok_or_else(|| Error::invalid(format!("rank {rank} has no address")))?;
        let listener = TcpListener::bind(addr)?;
        let (tx, rx) = channel::<Result<Vec<u8>>>();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let tx = tx.clone();
                thread::spawn(move || loop {
                    match read_frame(&mut stream) {
                        Ok(Some(f)) => {
                            if tx.send(Ok(f)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => return,
                        Err(e) => {
                            let _ = tx.send(Err(Error::Transport(format!("read failed: {e}"))));
                            return;
                        }
                    }
                });
            }
        });
        Ok(TcpTransport {
            rank,
            addrs,
            conns: HashMap::new(),
            inbox: rx,
            connect_timeout,
        })
    }

    fn connection(&mut self, to: NodeId) -> Result<&mut TcpStream> {
        if !self.conns.contains_key(&to) {
            let addr = *self
                .addrs
                .get(to as usize)
                .ok_or_else(|| Error::Transport(format!("no node {to}")))?;
            let deadline = Instant::now() + self.connect_timeout;
            let stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(Error::Transport(format!("cannot connect to node {to} at {addr}: {e}")))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(50)),
                }
            };
            stream.set_nodelay(true)?;
            self.conns.insert(to, stream);
        }
        Ok(self.conns.get_mut(&to).expect("inserted"))
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> NodeId {
        self.rank
    }

    fn n_nodes(&self) -> usize {
        self.addrs.len()
    }

    fn send(&mut self, to: NodeId, frame: Vec<u8>) -> Result<()> {
        self.connection(to)?
            .write_all(&frame)
            .map_err(|e| Error::Transport(format!("send to node {to} failed: {e}")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => f.map(Some),
            Err(_) => Ok(None),
        }
    }
}

/// Validating, de-duplicating receive side of a node.
struct Mailbox<'a> {
    transport: &'a mut dyn Transport,
    /// Every message this node may legally receive.
    allowed: HashSet<MessageKey>,
    seen: HashSet<MessageKey>,
    buffered: HashMap<MessageKey, Frame>,
    timeout: Duration,
    sent: usize,
}

impl<'a> Mailbox<'a> {
    fn send(&mut self, to: NodeId, frame: Frame) -> Result<()> {
        self.sent += 1;
        self.transport.send(to, frame.encode())
    }

    /// Waits for exactly the `expected` messages.
    fn collect(&mut self, expected: &[MessageKey]) -> Result<HashMap<MessageKey, Frame>> {
        let mut out = HashMap::new();
        for k in expected {
            if let Some(f) = self.buffered.remove(k) {
                out.insert(*k, f);
            }
        }
        let deadline = Instant::now() + self.timeout;
        while out.len() < expected.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let raw = if left.is_zero() { None } else { self.transport.recv(left)? };
            let Some(raw) = raw else {
                let mut missing: Vec<(RegionId, usize)> = expected
                    .iter()
                    .filter(|k| !out.contains_key(*k))
                    .map(|k| (k.region, k.sender as usize))
                    .collect();
                missing.sort();
                return Err(Error::Timeout { missing });
            };
            let frame = Frame::decode(&raw)?;
            let key = frame.key();
            if !self.allowed.contains(&key) {
                return Err(Error::Transport(format!(
                    "unexpected {:?} message for region {} from node {}",
                    key.kind, key.region, key.sender
                )));
            }
            if !self.seen.insert(key) {
                return Err(Error::Transport(format!(
                    "duplicate {:?} message for region {} from node {}",
                    key.kind, key.region, key.sender
                )));
            }
            if expected.contains(&key) {
                out.insert(key, frame);
            } else {
                self.buffered.insert(key, frame);
            }
        }
        Ok(out)
    }
}

/// Messages node `me` may receive under `plan`.
fn allowed_messages(plan: &ExecutionPlan, me: NodeId, gather: bool) -> HashSet<MessageKey> {
    let mut out = HashSet::new();
    for (id, role) in &plan.roles {
        if let RegionRole::Sync { supervisor, workers } = role {
            if *supervisor == me {
                for w in workers {
                    out.insert(MessageKey { kind: MessageKind::Summary, region: *id, sender: *w });
                }
            }
            if workers.contains(&me) {
                out.insert(MessageKey { kind: MessageKind::Chain, region: *id, sender: *supervisor });
            }
        }
    }
    if gather && me == 0 {
        for n in 1..plan.n_nodes as NodeId {
            out.insert(MessageKey { kind: MessageKind::Prediction, region: RegionId::ROOT, sender: n });
        }
    }
    out
}

/// Outcome of the distributed posterior pass on one node.
#[derive(Clone, Debug)]
pub struct NodePosterior {
    pub rank: NodeId,
    /// Records of the regions this node holds; node 0 also has the
    /// log-likelihood and root summary.
    pub posterior: Posterior,
    pub messages_sent: usize,
    pub level_steps: usize,
}

/// Options shared by the distributed passes.
#[derive(Clone, Copy, Debug)]
pub struct DistOptions {
    pub timeout: Duration,
}

impl Default for DistOptions {
    fn default() -> Self {
        DistOptions {
            timeout: Duration::from_secs(60),
        }
    }
}

fn check_rank(plan: &ExecutionPlan, transport: &dyn Transport) -> Result<NodeId> {
    let me = transport.rank();
    if transport.n_nodes() != plan.n_nodes || me as usize >= plan.n_nodes {
        return Err(Error::invalid(format!(
            "transport has {} nodes (rank {me}) but the plan has {}",
            transport.n_nodes(),
            plan.n_nodes
        )));
    }
    Ok(me)
}

/// Builds the prior shard a node needs: its working regions and their ancestors.
pub fn build_shard(tree: Arc<RegionTree>, spec: &KernelSpec, plan: &ExecutionPlan, node: NodeId) -> Result<Prior> {
    let wanted = plan.working_set(node);
    Prior::build(tree, spec, Some(&wanted))
}

/// Leaf-to-root pass on one node. `y` is indexed like the observations
/// attached to the tree; only this node's leaves are read.
pub fn run_distributed_posterior(
    prior: &Prior,
    y: &[f64],
    plan: &ExecutionPlan,
    transport: &mut dyn Transport,
    opts: DistOptions,
) -> Result<NodePosterior> {
    let me = check_rank(plan, transport)?;
    let tree = prior.tree();
    let allowed = allowed_messages(plan, me, false);
    let mut mail = Mailbox {
        transport,
        allowed,
        seen: HashSet::new(),
        buffered: HashMap::new(),
        timeout: opts.timeout,
        sent: 0,
    };
    let mut post = Posterior::default();
    let mut summaries: HashMap<RegionId, Summary> = HashMap::new();
    for leaf in tree.leaves_dfs() {
        if plan.leaf_owner(leaf) == Some(me) {
            let rp = prior
                .get(leaf)
                .ok_or_else(|| Error::invalid(format!("prior shard lacks leaf {leaf}")))?;
            let (s, lp) = leaf_step(rp, &leaf_values(tree, leaf, y))?;
            summaries.insert(leaf, s);
            post.leaves.insert(leaf, lp);
        }
    }
    let mut steps = 0;
    for m in (1..=tree.depth() as u32).rev() {
        let level = plan.internal_regions(m);
        if m < tree.depth() as u32 {
            steps += 1;
        }
        for id in level {
            if plan.role(*id, me) == Role::Worker {
                let supervisor = plan.holder(*id).expect("internal region");
                let mut e = Encoder::new();
                let mine: Vec<RegionId> = tree.region(*id).children.iter().copied().filter(|c| summaries.contains_key(c)).collect();
                e.u64(mine.len() as u64);
                for c in mine {
                    e.region(c);
                    summaries.remove(&c).expect("held").encode(&mut e);
                }
                mail.send(
                    supervisor,
                    Frame { kind: MessageKind::Summary, region: *id, sender: me, payload: e.finish() },
                )?;
            }
        }
        for id in level {
            let role = plan.role(*id, me);
            if !matches!(role, Role::Local | Role::Supervisor) {
                continue;
            }
            if let Some(RegionRole::Sync { workers, .. }) = plan.region_role(*id) {
                let keys: Vec<MessageKey> = workers
                    .iter()
                    .map(|w| MessageKey { kind: MessageKind::Summary, region: *id, sender: *w })
                    .collect();
                for (_, f) in mail.collect(&keys)? {
                    let mut d = Decoder::new(&f.payload);
                    let k = d.u64()?;
                    for _ in 0..k {
                        let c = d.region()?;
                        if tree.region(*id).children.binary_search(&c).is_err() {
                            return Err(Error::Transport(format!("node {} sent a summary of {c}, not a child of {id}", f.sender)));
                        }
                        summaries.insert(c, Summary::decode(&mut d)?);
                    }
                    d.expect_done()?;
                }
            }
            let kids: Vec<&Summary> = tree
                .region(*id)
                .children
                .iter()
                .map(|c| summaries.get(c).ok_or_else(|| Error::invalid(format!("summary of {c} missing at node {me}"))))
                .collect::<Result<_>>()?;
            let merged = Summary::merge(&kids)?;
            let r_own = prior
                .get(*id)
                .ok_or_else(|| Error::invalid(format!("prior shard lacks region {id}")))?
                .n_knots();
            let (s, rec) = integrate_region(*id, r_own, &merged)?;
            for c in &tree.region(*id).children {
                summaries.remove(c);
            }
            summaries.insert(*id, s);
            post.internal.insert(*id, rec);
        }
    }
    if me == 0 {
        let root = summaries.remove(&RegionId::ROOT).ok_or_else(|| Error::invalid("root summary missing on node 0"))?;
        post.log_likelihood = Some(root.log_likelihood());
        post.root = Some(root);
        if let Some(rec) = post.internal.get_mut(&RegionId::ROOT) {
            rec.mean = region_mean(rec, &nalgebra::DVector::zeros(0));
        }
    }
    Ok(NodePosterior {
        rank: me,
        posterior: post,
        messages_sent: mail.sent,
        level_steps: steps,
    })
}

/// Root-to-leaf distribution of posterior means followed by prediction at
/// the targets whose leaves this node owns. Every node passes the same
/// targets; node 0 returns the assembled field, other nodes `None`.
pub fn run_distributed_predict(
    prior: &Prior,
    node: &mut NodePosterior,
    plan: &ExecutionPlan,
    targets: &[LonLat],
    transport: &mut dyn Transport,
    opts: DistOptions,
) -> Result<Option<PredictionField>> {
    let me = check_rank(plan, transport)?;
    let tree = prior.tree();
    let allowed = allowed_messages(plan, me, true);
    let mut mail = Mailbox {
        transport,
        allowed,
        seen: HashSet::new(),
        buffered: HashMap::new(),
        timeout: opts.timeout,
        sent: 0,
    };
    let post = &mut node.posterior;
    for m in 1..=tree.depth() as u32 {
        for id in plan.internal_regions(m) {
            if plan.holder(*id) != Some(me) {
                continue;
            }
            let chain = tree.ancestors(*id);
            if !chain.is_empty() || me != 0 {
                let anc: Vec<f64> = chain
                    .iter()
                    .map(|c| {
                        post.internal
                            .get(c)
                            .map(|r| r.mean.iter().copied().collect::<Vec<_>>())
                            .ok_or_else(|| Error::invalid(format!("record of {c} missing at node {me}")))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .concat();
                let rec = post.internal.get(id).expect("held record");
                let mean = region_mean(rec, &nalgebra::DVector::from_vec(anc));
                post.internal.get_mut(id).expect("held").mean = mean;
            }
            if let Some(RegionRole::Sync { workers, .. }) = plan.region_role(*id) {
                let mut e = Encoder::new();
                let mut records: Vec<RegionId> = chain.clone();
                records.push(*id);
                e.u64(records.len() as u64);
                for r in &records {
                    post.internal[r].encode(&mut e);
                }
                let payload = e.finish();
                for w in workers {
                    mail.send(
                        *w,
                        Frame { kind: MessageKind::Chain, region: *id, sender: me, payload: payload.clone() },
                    )?;
                }
            }
        }
        for id in plan.internal_regions(m) {
            if plan.role(*id, me) != Role::Worker {
                continue;
            }
            let key = MessageKey { kind: MessageKind::Chain, region: *id, sender: plan.holder(*id).expect("held") };
            let got = mail.collect(&[key])?;
            let mut d = Decoder::new(&got[&key].payload);
            for _ in 0..d.u64()? {
                let rec = RegionPosterior::decode(&mut d)?;
                post.internal.insert(rec.id, rec);
            }
            d.expect_done()?;
        }
    }

    let mine: Vec<usize> = (0..targets.len())
        .filter(|&i| tree.route(targets[i]).and_then(|l| plan.leaf_owner(l)) == Some(me))
        .collect();
    let pts: Vec<LonLat> = mine.iter().map(|&i| targets[i]).collect();
    let local = predict(prior, post, &pts, PredictOptions { include_nugget: prior.spec().include_nugget, joint: false })?;
    if me != 0 {
        let mut e = Encoder::new();
        e.u64(mine.len() as u64);
        for (k, &i) in mine.iter().enumerate() {
            e.u64(i as u64).f64(local.mean[k]).f64(local.sd[k]);
        }
        e.u64(local.errors.len() as u64);
        for (k, msg) in &local.errors {
            e.u64(mine[*k] as u64).bytes(msg.as_bytes());
        }
        mail.send(0, Frame { kind: MessageKind::Prediction, region: RegionId::ROOT, sender: me, payload: e.finish() })?;
        return Ok(None);
    }
    let mut field = PredictionField {
        locations: targets.to_vec(),
        mean: vec![f64::NAN; targets.len()],
        sd: vec![f64::NAN; targets.len()],
        errors: Vec::new(),
        joint: None,
    };
    for (k, &i) in mine.iter().enumerate() {
        field.mean[i] = local.mean[k];
        field.sd[i] = local.sd[k];
    }
    field.errors.extend(local.errors.iter().map(|(k, m)| (mine[*k], m.clone())));
    for (i, p) in targets.iter().enumerate() {
        if tree.route(*p).is_none() {
            field.errors.push((i, format!("location {p} lies outside the level-1 region")));
        }
    }
    let keys: Vec<MessageKey> = (1..plan.n_nodes as NodeId)
        .map(|n| MessageKey { kind: MessageKind::Prediction, region: RegionId::ROOT, sender: n })
        .collect();
    for (_, f) in mail.collect(&keys)? {
        let mut d = Decoder::new(&f.payload);
        for _ in 0..d.u64()? {
            let i = d.u64()? as usize;
            if i >= targets.len() {
                return Err(Error::Transport(format!("node {} returned target index {i}", f.sender)));
            }
            field.mean[i] = d.f64()?;
            field.sd[i] = d.f64()?;
        }
        for _ in 0..d.u64()? {
            let i = d.u64()? as usize;
            let msg = String::from_utf8_lossy(d.bytes()?).into_owned();
            field.errors.push((i, msg));
        }
        d.expect_done()?;
    }
    field.errors.sort_by_key(|e| e.0);
    Ok(Some(field))
}

/// Result of an in-process cluster run.
#[derive(Clone, Debug)]
pub struct ClusterRun {
    pub root: NodePosterior,
    pub field: PredictionField,
    pub messages_sent: usize,
}

/// Runs the full distributed pipeline on `n_nodes` threads over loopback.
pub fn run_loopback_cluster(
    tree: Arc<RegionTree>,
    spec: &KernelSpec,
    y: &[f64],
    targets: &[LonLat],
    n_nodes: usize,
    opts: DistOptions,
) -> Result<ClusterRun> {
    let plan = make_plan(&tree, n_nodes)?;
    let results: Vec<Result<(NodePosterior, Option<PredictionField>, usize)>> = thread::scope(|scope| {
        let handles: Vec<_> = loopback(n_nodes)
            .into_iter()
            .map(|mut t| {
                let (tree, plan) = (tree.clone(), &plan);
                scope.spawn(move || {
                    let prior = build_shard(tree, spec, plan, t.rank())?;
                    let mut node = run_distributed_posterior(&prior, y, plan, &mut t, opts)?;
                    let up = node.messages_sent;
                    let field = run_distributed_predict(&prior, &mut node, plan, targets, &mut t, opts)?;
                    Ok((node, field, up))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("node thread panicked".into()))))
            .collect()
    });
    let mut root = None;
    let mut field = None;
    let mut messages = 0;
    for r in results {
        let (node, f, up) = r?;
        messages += up;
        if node.rank == 0 {
            field = f;
            root = Some(node);
        }
    }
    Ok(ClusterRun {
        root: root.expect("node 0"),
        field: field.expect("node 0 field"),
        messages_sent: messages,
    })
}

#[cfg(test)]
mod tests;
