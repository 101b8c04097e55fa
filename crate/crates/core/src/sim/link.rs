//! Bottleneck queue state: drop-tail FIFO or per-flow round-robin fair
//! queueing over fixed-size packets.

use std::collections::VecDeque;

use super::{LinkSpec, QueueDiscipline};

#[derive(Debug, Clone, Copy)]
pub(super) struct QueuedPacket {
    pub flow: usize,
    pub pkt: u64,
    pub sent_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum EnqueueOutcome {
    Queued,
    DroppedBuffer,
    DroppedRandom,
}

#[derive(Debug)]
pub(super) struct LinkState {
    pub spec: LinkSpec,
    in_service: Option<QueuedPacket>,
    fifo: VecDeque<QueuedPacket>,
    per_flow: Vec<VecDeque<QueuedPacket>>,
    /// Last flow served; round-robin resumes after it.
    rr_cursor: usize,
    queued: usize,
}

impl LinkState {
    pub fn new(spec: LinkSpec, n_flows: usize) -> Self {
        LinkState {
            spec,
            in_service: None,
            fifo: VecDeque::new(),
            per_flow: vec![VecDeque::new(); n_flows],
            rr_cursor: 0,
            queued: 0,
        }
    }

    /// Admits or drops an arriving packet. `loss_draw` is the flow's uniform
    /// draw for the forward random-loss check, which applies regardless of
    /// queue state; `active_flows` sizes the per-flow share under FQ.
    pub fn enqueue(
        &mut self,
        qp: QueuedPacket,
        loss_draw: f64,
        active_flows: usize,
    ) -> EnqueueOutcome {
        if loss_draw < self.spec.random_loss {
            return EnqueueOutcome::DroppedRandom;
        }
        match self.spec.queue_discipline {
            QueueDiscipline::DropTailFifo => {
                if self.queued >= self.spec.buffer_packets as usize {
                    return EnqueueOutcome::DroppedBuffer;
                }
                self.fifo.push_back(qp);
            }
            QueueDiscipline::PerFlowFq => {
                let share = (self.spec.buffer_packets as usize / active_flows.max(1)).max(1);
                if self.per_flow[qp.flow].len() >= share {
                    return EnqueueOutcome::DroppedBuffer;
                }
                self.per_flow[qp.flow].push_back(qp);
            }
        }
        self.queued += 1;
        EnqueueOutcome::Queued
    }

    /// Starts serving the next packet if the server is idle. Returns the
    /// packet now in service, to be departed after one service time.
    pub fn start_service(&mut self) -> Option<QueuedPacket> {
        if self.in_service.is_some() {
            return None;
        }
        let next = match self.spec.queue_discipline {
            QueueDiscipline::DropTailFifo => self.fifo.pop_front(),
            QueueDiscipline::PerFlowFq => self.fq_next(),
        };
        if let Some(qp) = next {
            self.queued -= 1;
            self.in_service = Some(qp);
        }
        self.in_service
    }

    /// Completes the in-service packet.
    pub fn depart(&mut self) -> QueuedPacket {
        self.in_service.take().expect("departure without service")
    }

    /// Equal-size packets make deficit round robin plain round robin: serve
    /// the next nonempty queue after the cursor.
    fn fq_next(&mut self) -> Option<QueuedPacket> {
        let n = self.per_flow.len();
        for step in 1..=n {
            let idx = (self.rr_cursor + step) % n;
            if let Some(qp) = self.per_flow[idx].pop_front() {
                self.rr_cursor = idx;
                return Some(qp);
            }
        }
        None
    }

    pub fn service_time(&self) -> f64 {
        1.0 / self.spec.capacity.pps()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::Rate;

    fn spec(buffer: u32, q: QueueDiscipline) -> LinkSpec {
        LinkSpec {
            capacity: Rate::new(1000.0).unwrap(),
            prop_delay: 0.01,
            buffer_packets: buffer,
            random_loss: 0.0,
            ack_loss: 0.0,
            queue_discipline: q,
        }
    }

    fn qp(flow: usize, pkt: u64) -> QueuedPacket {
        QueuedPacket {
            flow,
            pkt,
            sent_at: 0.0,
        }
    }

    #[test]
    fn drop_tail_at_capacity() {
        let mut l = LinkState::new(spec(2, QueueDiscipline::DropTailFifo), 1);
        assert_eq!(l.enqueue(qp(0, 0), 0.5, 1), EnqueueOutcome::Queued);
        assert_eq!(l.enqueue(qp(0, 1), 0.5, 1), EnqueueOutcome::Queued);
        assert_eq!(l.enqueue(qp(0, 2), 0.5, 1), EnqueueOutcome::DroppedBuffer);
        // Service frees a slot.
        assert!(l.start_service().is_some());
        assert_eq!(l.enqueue(qp(0, 3), 0.5, 1), EnqueueOutcome::Queued);
    }

    #[test]
    fn random_drop_ignores_queue_state() {
        let mut s = spec(10, QueueDiscipline::DropTailFifo);
        s.random_loss = 0.3;
        let mut l = LinkState::new(s, 1);
        assert_eq!(l.enqueue(qp(0, 0), 0.29, 1), EnqueueOutcome::DroppedRandom);
        assert_eq!(l.enqueue(qp(0, 1), 0.31, 1), EnqueueOutcome::Queued);
    }

    #[test]
    fn fifo_preserves_order() {
        let mut l = LinkState::new(spec(10, QueueDiscipline::DropTailFifo), 2);
        l.enqueue(qp(0, 0), 0.5, 2);
        l.enqueue(qp(1, 7), 0.5, 2);
        l.enqueue(qp(0, 1), 0.5, 2);
        let a = l.start_service().unwrap();
        assert_eq!((a.flow, a.pkt), (0, 0));
        l.depart();
        let b = l.start_service().unwrap();
        assert_eq!((b.flow, b.pkt), (1, 7));
        l.depart();
        let c = l.start_service().unwrap();
        assert_eq!((c.flow, c.pkt), (0, 1));
    }

    #[test]
    fn fq_alternates_between_backlogged_flows() {
        let mut l = LinkState::new(spec(10, QueueDiscipline::PerFlowFq), 2);
        for i in 0..3 {
            l.enqueue(qp(0, i), 0.5, 2);
            l.enqueue(qp(1, 10 + i), 0.5, 2);
        }
        let mut order = Vec::new();
        while let Some(p) = l.start_service() {
            order.push(p.flow);
            l.depart();
        }
        assert_eq!(order, vec![1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn fq_work_conserving_when_one_flow_idle() {
        let mut l = LinkState::new(spec(10, QueueDiscipline::PerFlowFq), 2);
        for i in 0..4 {
            l.enqueue(qp(1, i), 0.5, 2);
        }
        let mut served = 0;
        while let Some(p) = l.start_service() {
            assert_eq!(p.flow, 1);
            served += 1;
            l.depart();
        }
        assert_eq!(served, 4);
    }

    #[test]
    fn fq_buffer_share_splits_across_active_flows() {
        let mut l = LinkState::new(spec(4, QueueDiscipline::PerFlowFq), 2);
        // Two active flows: each owns 2 slots.
        assert_eq!(l.enqueue(qp(0, 0), 0.5, 2), EnqueueOutcome::Queued);
        assert_eq!(l.enqueue(qp(0, 1), 0.5, 2), EnqueueOutcome::Queued);
        assert_eq!(l.enqueue(qp(0, 2), 0.5, 2), EnqueueOutcome::DroppedBuffer);
        assert_eq!(l.enqueue(qp(1, 3), 0.5, 2), EnqueueOutcome::Queued);
    }
}
