//! Property tests for the codec, replay buffer, epsilon schedule, and the
//! Double-DQN target degeneracy.

use proptest::prelude::*;

use channel_rl::dqn::{
    Architecture, EpsilonSchedule, QNetwork, ReplayBuffer, Transition, WhichNet,
};
use channel_rl::hil::{decode_frame, encode_frame, Frame, FrameDecoder, MsgType};
use channel_rl::rng;

fn arb_msg_type() -> impl Strategy<Value = MsgType> {
    prop_oneof![
        Just(MsgType::AssignChannel),
        Just(MsgType::TxResult),
        Just(MsgType::Ping),
        Just(MsgType::Pong),
        Just(MsgType::Error),
    ]
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    (arb_msg_type(), any::<u8>(), proptest::collection::vec(any::<u8>(), 0..=255))
        .prop_map(|(msg_type, agent_id, payload)| Frame::new(msg_type, agent_id, payload))
}

proptest! {
    #[test]
    fn codec_round_trip(frame in arb_frame()) {
        let bytes = encode_frame(&frame).unwrap();
        let (decoded, consumed) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(decoded, frame);
        prop_assert_eq!(consumed, bytes.len());
    }

    #[test]
    fn frame_recovered_from_garbage(
        frame in arb_frame(),
        garbage in proptest::collection::vec(any::<u8>(), 0..=64),
    ) {
        let mut bytes = garbage;
        bytes.extend(encode_frame(&frame).unwrap());
        let (decoded, _) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(decoded, frame);
    }

    #[test]
    fn streaming_decoder_recovers_frame_sequence(
        frames in proptest::collection::vec(arb_frame(), 1..5),
        chunk in 1usize..16,
    ) {
        let mut bytes = Vec::new();
        for f in &frames {
            bytes.extend(encode_frame(f).unwrap());
        }
        let mut decoder = FrameDecoder::new();
        let mut got = Vec::new();
        for piece in bytes.chunks(chunk) {
            decoder.push_bytes(piece);
            while let Some(result) = decoder.next_frame() {
                got.push(result.unwrap());
            }
        }
        prop_assert_eq!(got, frames);
    }

    #[test]
    fn buffer_holds_last_capacity_pushes_in_order(
        capacity in 1usize..64,
        acks in proptest::collection::vec(any::<bool>(), 0..200),
    ) {
        let mut buf = ReplayBuffer::new(capacity);
        for (i, &ack) in acks.iter().enumerate() {
            buf.push(Transition::from_ack((i % 2) as u8, i % 3, ack)).unwrap();
        }
        let expected: Vec<Transition> = acks
            .iter()
            .enumerate()
            .map(|(i, &ack)| Transition::from_ack((i % 2) as u8, i % 3, ack))
            .collect();
        let tail = &expected[expected.len().saturating_sub(capacity)..];
        let held: Vec<Transition> = buf.iter().copied().collect();
        prop_assert_eq!(held, tail.to_vec());
    }

    #[test]
    fn epsilon_schedule_properties(total in 2u32..2000) {
        let sched = EpsilonSchedule::new(total);
        prop_assert_eq!(sched.epsilon_at(1).unwrap(), 1.0);
        prop_assert_eq!(sched.epsilon_at(total).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for n in 1..=total {
            let e = sched.epsilon_at(n).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn synced_double_target_equals_vanilla(seed in any::<u64>()) {
        let mut net = QNetwork::init(seed, Architecture::new(16, 3));
        net.sync_target();
        for state in [0u8, 1] {
            for action in 0..3 {
                for ack in [false, true] {
                    let t = Transition::from_ack(state, action, ack);
                    let q = net.forward(t.next_state, WhichNet::Main);
                    let vanilla = t.reward as f64
                        + 0.6 * q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let double = net.double_dqn_target(&t, 0.6);
                    prop_assert!((double - vanilla).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampling_is_a_sub_multiset_of_contents(seed in any::<u64>(), extra in 0usize..50) {
        let size = 16 + extra;
        let mut buf = ReplayBuffer::new(size);
        for i in 0..size {
            buf.push(Transition::from_ack((i % 2) as u8, i % 3, i % 2 == 0)).unwrap();
        }
        let mut r = rng::derive(seed, 0);
        let batch = buf.sample_minibatch(16, &mut r).unwrap();
        prop_assert_eq!(batch.len(), 16);
        // without replacement: each distinct transition appears at most as
        // often in the batch as it does in the buffer
        let mut held: Vec<Transition> = buf.iter().copied().collect();
        for t in &batch {
            let pos = held.iter().position(|h| h == t);
            prop_assert!(pos.is_some());
            held.swap_remove(pos.unwrap());
        }
    }
}
