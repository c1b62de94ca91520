//! Signed strict-majority voting over swarm membership and policy.
//!
//! Every member runs the same state machine. A proposal names the epoch it
//! was made in and can only be applied at that epoch, so once one proposal
//! is applied every other proposal from the same epoch is stale. A proposal
//! is accepted when more than half of the full membership has voted yes;
//! the applied log keeps each proposal with the ballots that carried it, so
//! any node can replay the log from genesis and check every signature.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::clock::UnixMs;
use crate::crypto::{sha256, PeerId, PeerIdentity, PublicKeys, Signature};
use crate::wire::{Decoder, Encoder, WireError};

pub const DEFAULT_PROPOSAL_TTL_MS: u64 = 24 * 60 * 60 * 1000;
const PROPOSAL_TAG: &[u8] = b"fybrr/proposal/v1";
const BALLOT_TAG: &[u8] = b"fybrr/ballot/v1";
const STATE_TAG: &[u8] = b"fybrr/membership/v1";
const MAX_POLICY_LEN: usize = 1024;

pub type ProposalId = [u8; 32];

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("{0} is not a member")]
    NotMember(PeerId),
    #[error("malformed subject: {0}")]
    MalformedSubject(&'static str),
    #[error("signature invalid")]
    InvalidSignature,
    #[error("unknown proposal")]
    UnknownProposal,
    #[error("proposal expired")]
    Expired,
    #[error("proposal was made at epoch {proposal} but state is at {state}")]
    StaleEpoch { proposal: u64, state: u64 },
    #[error("proposal is not accepted")]
    NotAccepted,
    #[error("proposal already decided")]
    Decided,
    #[error("log replay failed at entry {index}: {reason}")]
    Replay { index: usize, reason: String },
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalKind {
    /// Carries the newcomer's keys so its ballots and registrations can be
    /// verified once it is a member.
    AddMember {
        #[serde(serialize_with = "ser_keys")]
        keys: PublicKeys,
    },
    RemoveMember {
        #[serde(serialize_with = "ser_display")]
        peer: PeerId,
    },
    PromoteBootstrap {
        #[serde(serialize_with = "ser_display")]
        peer: PeerId,
    },
    DemoteBootstrap {
        #[serde(serialize_with = "ser_display")]
        peer: PeerId,
    },
    SetPolicy {
        name: String,
        value: String,
    },
}

fn ser_display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn ser_keys<S: serde::Serializer>(k: &PublicKeys, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&k.peer_id())
}

impl ProposalKind {
    fn tag(&self) -> u8 {
        match self {
            ProposalKind::AddMember { .. } => 1,
            ProposalKind::RemoveMember { .. } => 2,
            ProposalKind::PromoteBootstrap { .. } => 3,
            ProposalKind::DemoteBootstrap { .. } => 4,
            ProposalKind::SetPolicy { .. } => 5,
        }
    }

    /// The peer the proposal is about, if any.
    pub fn subject_peer(&self) -> Option<PeerId> {
        match self {
            ProposalKind::AddMember { keys } => Some(keys.peer_id()),
            ProposalKind::RemoveMember { peer }
            | ProposalKind::PromoteBootstrap { peer }
            | ProposalKind::DemoteBootstrap { peer } => Some(*peer),
            ProposalKind::SetPolicy { .. } => None,
        }
    }

    fn encode_into(&self, e: Encoder) -> Encoder {
        let e = e.u8(self.tag());
        match self {
            ProposalKind::AddMember { keys } => e.var(&keys.encode()),
            ProposalKind::RemoveMember { peer }
            | ProposalKind::PromoteBootstrap { peer }
            | ProposalKind::DemoteBootstrap { peer } => e.var(peer.as_bytes()),
            ProposalKind::SetPolicy { name, value } => e.var(&Encoder::new().str(name).str(value).finish()),
        }
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let tag = d.u8()?;
        let subject = d.var()?;
        let peer = || -> Result<PeerId, WireError> {
            PeerId::from_slice(subject).map_err(|_| WireError::Invalid("subject peer"))
        };
        Ok(match tag {
            1 => ProposalKind::AddMember {
                keys: PublicKeys::decode(subject).map_err(|_| WireError::Invalid("subject keys"))?,
            },
            2 => ProposalKind::RemoveMember { peer: peer()? },
            3 => ProposalKind::PromoteBootstrap { peer: peer()? },
            4 => ProposalKind::DemoteBootstrap { peer: peer()? },
            5 => {
                let mut s = Decoder::new(subject);
                let name = s.string()?;
                let value = s.string()?;
                s.finish()?;
                ProposalKind::SetPolicy { name, value }
            }
            _ => return Err(WireError::Invalid("proposal kind")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub kind: ProposalKind,
    pub proposer: PeerId,
    pub epoch: u64,
    pub created_at: UnixMs,
    pub deadline: UnixMs,
    pub signature: Signature,
}

impl Proposal {
    pub fn new_signed(
        proposer: &PeerIdentity,
        kind: ProposalKind,
        epoch: u64,
        created_at: UnixMs,
        ttl_ms: u64,
    ) -> Self {
        let mut p = Self {
            kind,
            proposer: proposer.peer_id(),
            epoch,
            created_at,
            deadline: created_at.saturating_add(ttl_ms.max(1)),
            signature: [0; 64],
        };
        p.signature = proposer.sign(&p.signing_bytes());
        p
    }

    /// Canonical encoding of everything but the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        self.kind
            .encode_into(Encoder::new().raw(PROPOSAL_TAG))
            .raw(self.proposer.as_bytes())
            .u64(self.epoch)
            .u64(self.created_at)
            .u64(self.deadline)
            .finish()
    }

    pub fn id(&self) -> ProposalId {
        sha256(&[&self.signing_bytes()])
    }

    pub fn encode_into(&self, e: Encoder) -> Encoder {
        self.kind
            .encode_into(e)
            .raw(self.proposer.as_bytes())
            .u64(self.epoch)
            .u64(self.created_at)
            .u64(self.deadline)
            .raw(&self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_into(Encoder::new()).finish()
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            kind: ProposalKind::decode_from(d)?,
            proposer: PeerId(d.array()?),
            epoch: d.u64()?,
            created_at: d.u64()?,
            deadline: d.u64()?,
            signature: d.array()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let p = Self::decode_from(&mut d)?;
        d.finish()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Yes,
    No,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ballot {
    pub proposal_id: ProposalId,
    pub voter: PeerId,
    pub choice: Choice,
    pub epoch: u64,
    pub signature: Signature,
}

impl Ballot {
    pub fn new_signed(voter: &PeerIdentity, proposal_id: ProposalId, choice: Choice, epoch: u64) -> Self {
        let mut b = Self {
            proposal_id,
            voter: voter.peer_id(),
            choice,
            epoch,
            signature: [0; 64],
        };
        b.signature = voter.sign(&b.signing_bytes());
        b
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        Encoder::new()
            .raw(BALLOT_TAG)
            .raw(&self.proposal_id)
            .raw(self.voter.as_bytes())
            .u8(matches!(self.choice, Choice::Yes) as u8)
            .u64(self.epoch)
            .finish()
    }

    pub fn encode_into(&self, e: Encoder) -> Encoder {
        e.raw(&self.proposal_id)
            .raw(self.voter.as_bytes())
            .u8(matches!(self.choice, Choice::Yes) as u8)
            .u64(self.epoch)
            .raw(&self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_into(Encoder::new()).finish()
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            proposal_id: d.array()?,
            voter: PeerId(d.array()?),
            choice: match d.u8()? {
                1 => Choice::Yes,
                0 => Choice::No,
                _ => return Err(WireError::Invalid("choice")),
            },
            epoch: d.u64()?,
            signature: d.array()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let b = Self::decode_from(&mut d)?;
        d.finish()?;
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tally {
    Pending,
    Accepted,
    Rejected,
}

/// The decision rule. Accepted iff yes votes are a strict majority of the
/// full membership; rejected once no votes make that impossible or the
/// deadline has passed; pending otherwise.
pub fn decide(members: usize, yes: usize, no: usize, now: UnixMs, deadline: UnixMs) -> Tally {
    if 2 * yes > members {
        Tally::Accepted
    } else if 2 * no >= members || now >= deadline {
        Tally::Rejected
    } else {
        Tally::Pending
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MembershipState {
    pub epoch: u64,
    pub members: BTreeMap<PeerId, PublicKeys>,
    pub bootstrap: BTreeSet<PeerId>,
    pub policies: BTreeMap<String, String>,
}

impl MembershipState {
    /// The swarm creator as sole member.
    pub fn genesis(creator: PublicKeys) -> Self {
        Self {
            epoch: 0,
            members: BTreeMap::from([(creator.peer_id(), creator)]),
            bootstrap: BTreeSet::new(),
            policies: BTreeMap::new(),
        }
    }

    pub fn is_member(&self, peer: &PeerId) -> bool {
        self.members.contains_key(peer)
    }

    pub fn creator_keys(&self) -> Option<PublicKeys> {
        (self.epoch == 0 && self.members.len() == 1).then(|| *self.members.values().next().unwrap())
    }

    /// Precondition check for a proposal at this state.
    pub fn check_subject(&self, kind: &ProposalKind) -> Result<(), ConsensusError> {
        match kind {
            ProposalKind::AddMember { keys } if self.is_member(&keys.peer_id()) => {
                Err(ConsensusError::MalformedSubject("already a member"))
            }
            ProposalKind::RemoveMember { peer } if !self.is_member(peer) => {
                Err(ConsensusError::MalformedSubject("not a member"))
            }
            ProposalKind::RemoveMember { .. } if self.members.len() == 1 => {
                Err(ConsensusError::MalformedSubject("cannot remove the last member"))
            }
            ProposalKind::PromoteBootstrap { peer } if !self.is_member(peer) => {
                Err(ConsensusError::MalformedSubject("bootstrap must be a member"))
            }
            ProposalKind::PromoteBootstrap { peer } if self.bootstrap.contains(peer) => {
                Err(ConsensusError::MalformedSubject("already bootstrap"))
            }
            ProposalKind::DemoteBootstrap { peer } if !self.bootstrap.contains(peer) => {
                Err(ConsensusError::MalformedSubject("not a bootstrap node"))
            }
            ProposalKind::SetPolicy { name, value }
                if name.is_empty() || name.len() > MAX_POLICY_LEN || value.len() > MAX_POLICY_LEN =>
            {
                Err(ConsensusError::MalformedSubject("policy name or value size"))
            }
            _ => Ok(()),
        }
    }

    /// The state after `kind` takes effect.
    pub fn applied(&self, kind: &ProposalKind) -> Self {
        let mut s = self.clone();
        s.epoch += 1;
        match kind {
            ProposalKind::AddMember { keys } => {
                s.members.insert(keys.peer_id(), *keys);
            }
            ProposalKind::RemoveMember { peer } => {
                s.members.remove(peer);
                s.bootstrap.remove(peer);
            }
            ProposalKind::PromoteBootstrap { peer } => {
                s.bootstrap.insert(*peer);
            }
            ProposalKind::DemoteBootstrap { peer } => {
                s.bootstrap.remove(peer);
            }
            ProposalKind::SetPolicy { name, value } => {
                s.policies.insert(name.clone(), value.clone());
            }
        }
        s
    }

    /// Canonical encoding; equal states encode to equal bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new()
            .raw(STATE_TAG)
            .u64(self.epoch)
            .u32(self.members.len() as u32);
        for k in self.members.values() {
            e = e.raw(&k.encode());
        }
        e = e.u32(self.bootstrap.len() as u32);
        for p in &self.bootstrap {
            e = e.raw(p.as_bytes());
        }
        e = e.u32(self.policies.len() as u32);
        for (k, v) in &self.policies {
            e = e.str(k).str(v);
        }
        e.finish()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.bootstrap.iter().all(|b| self.members.contains_key(b)) {
            return Err("bootstrap not a subset of members".into());
        }
        for (id, k) in &self.members {
            if k.peer_id() != *id {
                return Err(format!("member {id} keyed under wrong id"));
            }
        }
        Ok(())
    }
}

/// One applied proposal with the ballots that carried it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub proposal: Proposal,
    pub ballots: Vec<Ballot>,
}

impl LogEntry {
    fn encode_into(&self, e: Encoder) -> Encoder {
        let e = self.proposal.encode_into(e).u32(self.ballots.len() as u32);
        self.ballots.iter().fold(e, |e, b| b.encode_into(e))
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let proposal = Proposal::decode_from(d)?;
        let n = d.u32()? as usize;
        if n > 1 << 16 {
            return Err(WireError::Invalid("ballot count"));
        }
        let ballots = (0..n).map(|_| Ballot::decode_from(d)).collect::<Result<_, _>>()?;
        Ok(Self { proposal, ballots })
    }
}

pub fn encode_log(genesis: &PublicKeys, log: &[LogEntry]) -> Vec<u8> {
    log.iter()
        .fold(Encoder::new().raw(&genesis.encode()).u32(log.len() as u32), |e, l| {
            l.encode_into(e)
        })
        .finish()
}

pub fn decode_log(bytes: &[u8]) -> Result<(PublicKeys, Vec<LogEntry>), WireError> {
    let mut d = Decoder::new(bytes);
    let genesis = PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("genesis"))?;
    let n = d.u32()? as usize;
    if n > 1 << 20 {
        return Err(WireError::Invalid("log length"));
    }
    let log = (0..n)
        .map(|_| LogEntry::decode_from(&mut d))
        .collect::<Result<_, _>>()?;
    d.finish()?;
    Ok((genesis, log))
}

/// Counts the distinct valid voters of `ballots` for `proposal` at `state`;
/// a voter's first ballot binds.
fn bound_ballots<'a>(
    state: &MembershipState,
    pid: &ProposalId,
    epoch: u64,
    ballots: impl IntoIterator<Item = &'a Ballot>,
) -> Result<BTreeMap<PeerId, Ballot>, ConsensusError> {
    let mut bound = BTreeMap::new();
    for b in ballots {
        verify_ballot(state, pid, epoch, b)?;
        bound.entry(b.voter).or_insert_with(|| b.clone());
    }
    Ok(bound)
}

fn verify_ballot(state: &MembershipState, pid: &ProposalId, epoch: u64, b: &Ballot) -> Result<(), ConsensusError> {
    if &b.proposal_id != pid {
        return Err(ConsensusError::UnknownProposal);
    }
    if b.epoch != epoch {
        return Err(ConsensusError::StaleEpoch {
            proposal: epoch,
            state: b.epoch,
        });
    }
    let keys = state.members.get(&b.voter).ok_or(ConsensusError::NotMember(b.voter))?;
    if !keys.verify(&b.signing_bytes(), &b.signature) {
        return Err(ConsensusError::InvalidSignature);
    }
    Ok(())
}

fn verify_proposal(state: &MembershipState, p: &Proposal) -> Result<(), ConsensusError> {
    if p.epoch != state.epoch {
        return Err(ConsensusError::StaleEpoch {
            proposal: p.epoch,
            state: state.epoch,
        });
    }
    let keys = state
        .members
        .get(&p.proposer)
        .ok_or(ConsensusError::NotMember(p.proposer))?;
    if !keys.verify(&p.signing_bytes(), &p.signature) {
        return Err(ConsensusError::InvalidSignature);
    }
    if p.deadline <= p.created_at {
        return Err(ConsensusError::MalformedSubject("deadline not after creation"));
    }
    state.check_subject(&p.kind)
}

/// Replays a log from genesis, verifying every proposal and ballot.
pub fn replay(genesis: PublicKeys, log: &[LogEntry]) -> Result<MembershipState, ConsensusError> {
    let mut state = MembershipState::genesis(genesis);
    for (index, entry) in log.iter().enumerate() {
        let fail = |e: ConsensusError| ConsensusError::Replay {
            index,
            reason: e.to_string(),
        };
        verify_proposal(&state, &entry.proposal).map_err(fail)?;
        let pid = entry.proposal.id();
        let bound = bound_ballots(&state, &pid, entry.proposal.epoch, &entry.ballots).map_err(fail)?;
        let yes = bound.values().filter(|b| b.choice == Choice::Yes).count();
        if 2 * yes <= state.members.len() {
            return Err(fail(ConsensusError::NotAccepted));
        }
        state = state.applied(&entry.proposal.kind);
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposalStatus {
    pub proposal: Proposal,
    pub tally: Tally,
    pub yes: usize,
    pub no: usize,
    pub members: usize,
    pub applied: bool,
}

#[derive(Clone, Debug)]
struct Open {
    proposal: Proposal,
    ballots: BTreeMap<PeerId, Ballot>,
    applied: bool,
}

/// Outcome of feeding an event into the state machine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    /// Nothing new (duplicate proposal, or a ballot from a voter already counted).
    Duplicate,
    Recorded,
    /// The event tipped the proposal into acceptance and it was applied.
    Applied {
        epoch: u64,
    },
}

/// One node's replica of the governance state machine.
#[derive(Clone, Debug)]
pub struct Governance {
    genesis: PublicKeys,
    state: MembershipState,
    log: Vec<LogEntry>,
    open: BTreeMap<ProposalId, Open>,
}

impl Governance {
    pub fn new(genesis: PublicKeys) -> Self {
        Self {
            genesis,
            state: MembershipState::genesis(genesis),
            log: Vec::new(),
            open: BTreeMap::new(),
        }
    }

    pub fn genesis(&self) -> &PublicKeys {
        &self.genesis
    }

    pub fn state(&self) -> &MembershipState {
        &self.state
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn is_member(&self, peer: &PeerId) -> bool {
        self.state.is_member(peer)
    }

    pub fn proposal(&self, pid: &ProposalId) -> Option<&Proposal> {
        self.open.get(pid).map(|o| &o.proposal)
    }

    pub fn ballots(&self, pid: &ProposalId) -> Vec<Ballot> {
        self.open
            .get(pid)
            .map(|o| o.ballots.values().cloned().collect())
            .unwrap_or_default()
    }

    /// Creates and records a proposal at the current epoch.
    pub fn propose(
        &mut self,
        proposer: &PeerIdentity,
        kind: ProposalKind,
        now: UnixMs,
        ttl_ms: u64,
    ) -> Result<Proposal, ConsensusError> {
        if !self.state.is_member(&proposer.peer_id()) {
            return Err(ConsensusError::NotMember(proposer.peer_id()));
        }
        self.state.check_subject(&kind)?;
        let p = Proposal::new_signed(proposer, kind, self.state.epoch, now, ttl_ms);
        self.receive_proposal(p.clone())?;
        Ok(p)
    }

    pub fn receive_proposal(&mut self, p: Proposal) -> Result<Event, ConsensusError> {
        let pid = p.id();
        if self.open.contains_key(&pid) {
            return Ok(Event::Duplicate);
        }
        verify_proposal(&self.state, &p)?;
        self.open.insert(
            pid,
            Open {
                proposal: p,
                ballots: BTreeMap::new(),
                applied: false,
            },
        );
        Ok(Event::Recorded)
    }

    /// Signs a ballot and feeds it in.
    pub fn cast_vote(
        &mut self,
        voter: &PeerIdentity,
        pid: &ProposalId,
        choice: Choice,
        now: UnixMs,
    ) -> Result<(Ballot, Event), ConsensusError> {
        let epoch = self
            .open
            .get(pid)
            .ok_or(ConsensusError::UnknownProposal)?
            .proposal
            .epoch;
        let b = Ballot::new_signed(voter, *pid, choice, epoch);
        let ev = self.receive_ballot(b.clone(), now)?;
        Ok((b, ev))
    }

    pub fn receive_ballot(&mut self, b: Ballot, now: UnixMs) -> Result<Event, ConsensusError> {
        let open = self.open.get(&b.proposal_id).ok_or(ConsensusError::UnknownProposal)?;
        if open.applied {
            return Ok(Event::Duplicate);
        }
        if open.proposal.epoch != self.state.epoch {
            return Err(ConsensusError::StaleEpoch {
                proposal: open.proposal.epoch,
                state: self.state.epoch,
            });
        }
        if now >= open.proposal.deadline {
            return Err(ConsensusError::Expired);
        }
        match self.tally(&b.proposal_id, now)? {
            Tally::Pending => {}
            _ => return Err(ConsensusError::Decided),
        }
        verify_ballot(&self.state, &b.proposal_id, open.proposal.epoch, &b)?;
        let open = self.open.get_mut(&b.proposal_id).unwrap();
        if open.ballots.contains_key(&b.voter) {
            return Ok(Event::Duplicate);
        }
        let pid = b.proposal_id;
        open.ballots.insert(b.voter, b);
        if self.tally(&pid, now)? == Tally::Accepted {
            let epoch = self.apply(&pid, now)?;
            return Ok(Event::Applied { epoch });
        }
        Ok(Event::Recorded)
    }

    pub fn status(&self, pid: &ProposalId, now: UnixMs) -> Result<ProposalStatus, ConsensusError> {
        let open = self.open.get(pid).ok_or(ConsensusError::UnknownProposal)?;
        let yes = open.ballots.values().filter(|b| b.choice == Choice::Yes).count();
        let no = open.ballots.len() - yes;
        let members = if open.applied {
            self.log
                .iter()
                .position(|l| l.proposal.id() == *pid)
                .map(|i| replay_members_at(&self.genesis, &self.log, i))
                .unwrap_or(self.state.members.len())
        } else {
            self.state.members.len()
        };
        let tally = if open.applied {
            Tally::Accepted
        } else if open.proposal.epoch != self.state.epoch {
            Tally::Rejected
        } else {
            decide(members, yes, no, now, open.proposal.deadline)
        };
        Ok(ProposalStatus {
            proposal: open.proposal.clone(),
            tally,
            yes,
            no,
            members,
            applied: open.applied,
        })
    }

    pub fn tally(&self, pid: &ProposalId, now: UnixMs) -> Result<Tally, ConsensusError> {
        Ok(self.status(pid, now)?.tally)
    }

    /// Applies an accepted proposal; applying it again is a no-op that
    /// returns the epoch it produced.
    pub fn apply(&mut self, pid: &ProposalId, now: UnixMs) -> Result<u64, ConsensusError> {
        let open = self.open.get(pid).ok_or(ConsensusError::UnknownProposal)?;
        if open.applied {
            let i = self.log.iter().position(|l| l.proposal.id() == *pid).unwrap();
            return Ok(i as u64 + 1);
        }
        if self.tally(pid, now)? != Tally::Accepted {
            return Err(ConsensusError::NotAccepted);
        }
        let open = self.open.get_mut(pid).unwrap();
        open.applied = true;
        self.state = self.state.applied(&open.proposal.kind);
        self.log.push(LogEntry {
            proposal: open.proposal.clone(),
            ballots: open.ballots.values().cloned().collect(),
        });
        Ok(self.state.epoch)
    }

    /// Every known proposal with its status, newest epoch first.
    pub fn proposals(&self, now: UnixMs) -> Vec<ProposalStatus> {
        let mut v: Vec<ProposalStatus> = self.open.keys().filter_map(|p| self.status(p, now).ok()).collect();
        v.sort_by_key(|p| std::cmp::Reverse((p.proposal.epoch, p.proposal.created_at)));
        v
    }

    pub fn export_log(&self) -> Vec<u8> {
        encode_log(&self.genesis, &self.log)
    }

    /// Adopts a served log if it replays cleanly from our genesis and
    /// extends our own history. Returns whether anything changed.
    pub fn sync_from(&mut self, bytes: &[u8]) -> Result<bool, ConsensusError> {
        let (genesis, log) = decode_log(bytes)?;
        if genesis != self.genesis {
            return Err(ConsensusError::Replay {
                index: 0,
                reason: "different genesis".into(),
            });
        }
        let state = replay(genesis, &log)?;
        if log.len() <= self.log.len() {
            return Ok(false);
        }
        if log[..self.log.len()] != self.log[..] {
            return Err(ConsensusError::Replay {
                index: self.log.len(),
                reason: "served log diverges from ours".into(),
            });
        }
        for entry in &log[self.log.len()..] {
            let pid = entry.proposal.id();
            self.open.insert(
                pid,
                Open {
                    proposal: entry.proposal.clone(),
                    ballots: entry.ballots.iter().map(|b| (b.voter, b.clone())).collect(),
                    applied: true,
                },
            );
        }
        self.state = state;
        self.log = log;
        Ok(true)
    }
}

fn replay_members_at(genesis: &PublicKeys, log: &[LogEntry], index: usize) -> usize {
    replay(*genesis, &log[..index]).map(|s| s.members.len()).unwrap_or(0)
}
