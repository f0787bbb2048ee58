use std::ops::Sub;

/// Traffic between this rank and one peer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PeerTraffic {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
}

impl Sub for PeerTraffic {
    type Output = PeerTraffic;

    fn sub(self, o: PeerTraffic) -> PeerTraffic {
        PeerTraffic {
            messages_sent: self.messages_sent - o.messages_sent,
            bytes_sent: self.bytes_sent - o.bytes_sent,
            messages_received: self.messages_received - o.messages_received,
            bytes_received: self.bytes_received - o.bytes_received,
        }
    }
}

/// Monotone per-rank message and byte counts. Take a snapshot before a phase
/// and subtract it afterwards to attribute traffic to that phase.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
    pub per_peer: Vec<PeerTraffic>,
}

impl TrafficCounters {
    pub fn new(world_size: usize) -> Self {
        Self {
            per_peer: vec![PeerTraffic::default(); world_size],
            ..Default::default()
        }
    }

    pub(crate) fn record_send(&mut self, peer: usize, bytes: usize) {
        self.messages_sent += 1;
        self.bytes_sent += bytes as u64;
        let p = &mut self.per_peer[peer];
        p.messages_sent += 1;
        p.bytes_sent += bytes as u64;
    }

    pub(crate) fn record_receive(&mut self, peer: usize, bytes: usize) {
        self.messages_received += 1;
        self.bytes_received += bytes as u64;
        let p = &mut self.per_peer[peer];
        p.messages_received += 1;
        p.bytes_received += bytes as u64;
    }

    pub fn is_zero(&self) -> bool {
        self.messages_sent == 0 && self.messages_received == 0
    }

    /// Counts accumulated since `earlier`, which must be an older snapshot of the same rank.
    pub fn since(&self, earlier: &TrafficCounters) -> TrafficCounters {
        TrafficCounters {
            messages_sent: self.messages_sent - earlier.messages_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            messages_received: self.messages_received - earlier.messages_received,
            bytes_received: self.bytes_received - earlier.bytes_received,
            per_peer: self
                .per_peer
                .iter()
                .zip(&earlier.per_peer)
                .map(|(a, b)| *a - *b)
                .collect(),
        }
    }

    /// Element-wise sum, used to total phases or ranks.
    pub fn add(&mut self, o: &TrafficCounters) {
        self.messages_sent += o.messages_sent;
        self.bytes_sent += o.bytes_sent;
        self.messages_received += o.messages_received;
        self.bytes_received += o.bytes_received;
        if self.per_peer.len() < o.per_peer.len() {
            self.per_peer.resize(o.per_peer.len(), PeerTraffic::default());
        }
        for (a, b) in self.per_peer.iter_mut().zip(&o.per_peer) {
            a.messages_sent += b.messages_sent;
            a.bytes_sent += b.bytes_sent;
            a.messages_received += b.messages_received;
            a.bytes_received += b.bytes_received;
        }
    }
}
