use super::{Frame, TransportError};
use crate::models::Descriptor;
use crate::nn::{decode_fragment, encode_fragment, GradVector, ParamVector, Scalar};
use crate::protocol::{Control, Envelope, Message, MessageKind, SessionConfig, SessionKind};

const CONTROL_JOIN: u8 = 1;
const CONTROL_SESSION: u8 = 2;
const CONTROL_SHUTDOWN: u8 = 3;

fn vector_payload<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    encode_fragment(&[values.len()], values, &mut out).expect("rank-1 fragment of matching length");
    out
}

fn control_payload(c: &Control) -> Vec<u8> {
    match c {
        Control::Join => vec![CONTROL_JOIN],
        Control::Shutdown => vec![CONTROL_SHUTDOWN],
        Control::Session(s) => {
            let mut out = vec![CONTROL_SESSION, if s.kind == SessionKind::Pefll { 1 } else { 2 }];
            out.extend_from_slice(&s.seed.to_le_bytes());
            out.extend_from_slice(&s.local_steps.to_le_bytes());
            out.extend_from_slice(&s.local_batch.to_le_bytes());
            out.extend_from_slice(&s.descriptor_batch.to_le_bytes());
            out.extend_from_slice(&s.lr.to_le_bytes());
            out.extend_from_slice(&s.momentum.to_le_bytes());
            out.extend_from_slice(&s.lambda_theta.to_le_bytes());
            out.push(u8::from(s.unlabeled));
            out
        }
    }
}

pub fn encode_message<T: Scalar>(env: &Envelope<T>) -> Frame {
    let payload = match &env.message {
        Message::EmbedWeights(p) | Message::PersonalModel(p) => vector_payload(p),
        Message::Descriptor(v) => vector_payload(&v.0),
        Message::ModelDelta(g) | Message::DescriptorGrad(g) | Message::EmbedDelta(g) => vector_payload(g),
        Message::Control(c) => control_payload(c),
    };
    Frame { kind: env.message.kind(), round: env.round, client_id: env.client_id, payload }
}

fn vector<T: Scalar>(frame: &Frame) -> Result<Vec<T>, TransportError> {
    let mut pos = 0;
    let (dims, values) = decode_fragment::<T>(&frame.payload, &mut pos).map_err(|e| TransportError::payload(frame.kind, e))?;
    if dims.len() != 1 {
        return Err(TransportError::Payload { kind: frame.kind, msg: format!("expected a vector, got dims {dims:?}") });
    }
    if pos != frame.payload.len() {
        return Err(TransportError::Payload {
            kind: frame.kind,
            msg: format!("{} trailing bytes", frame.payload.len() - pos),
        });
    }
    Ok(values)
}

fn control(frame: &Frame) -> Result<Control, TransportError> {
    let p = &frame.payload;
    let bad = |msg: String| TransportError::Payload { kind: MessageKind::RoundControl, msg };
    match p.first() {
        Some(&CONTROL_JOIN) if p.len() == 1 => Ok(Control::Join),
        Some(&CONTROL_SHUTDOWN) if p.len() == 1 => Ok(Control::Shutdown),
        Some(&CONTROL_SESSION) if p.len() == 47 => {
            let kind = match p[1] {
                1 => SessionKind::Pefll,
                2 => SessionKind::FedAvg,
                k => return Err(bad(format!("unknown session kind {k}"))),
            };
            let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().expect("4 bytes"));
            let f64_at = |i: usize| f64::from_le_bytes(p[i..i + 8].try_into().expect("8 bytes"));
            Ok(Control::Session(SessionConfig {
                kind,
                seed: u64::from_le_bytes(p[2..10].try_into().expect("8 bytes")),
                local_steps: u32_at(10),
                local_batch: u32_at(14),
                descriptor_batch: u32_at(18),
                lr: f64_at(22),
                momentum: f64_at(30),
                lambda_theta: f64_at(38),
                unlabeled: match p[46] {
                    0 => false,
                    1 => true,
                    b => return Err(bad(format!("bad unlabeled flag {b}"))),
                },
            }))
        }
        _ => Err(bad(format!("unrecognised control payload of {} bytes", p.len()))),
    }
}

pub fn decode_message<T: Scalar>(frame: &Frame) -> Result<Envelope<T>, TransportError> {
    let message = match frame.kind {
        MessageKind::EmbedWeights => Message::EmbedWeights(ParamVector(vector(frame)?)),
        MessageKind::Descriptor => Message::Descriptor(Descriptor(vector(frame)?)),
        MessageKind::PersonalModel => Message::PersonalModel(ParamVector(vector(frame)?)),
        MessageKind::ModelDelta => Message::ModelDelta(GradVector(vector(frame)?)),
        MessageKind::DescriptorGrad => Message::DescriptorGrad(GradVector(vector(frame)?)),
        MessageKind::EmbedDelta => Message::EmbedDelta(GradVector(vector(frame)?)),
        MessageKind::RoundControl => Message::Control(control(frame)?),
    };
    Ok(Envelope::new(frame.round, frame.client_id, message))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_control_round_trips() {
        let s = SessionConfig {
            kind: SessionKind::FedAvg,
            seed: u64::MAX - 3,
            local_steps: 50,
            local_batch: 32,
            descriptor_batch: 16,
            lr: 0.0125,
            momentum: 0.9,
            lambda_theta: 5e-3,
            unlabeled: true,
        };
        let env: Envelope<f32> = Envelope::new(4, 2, Message::Control(Control::Session(s)));
        let frame = encode_message(&env);
        assert_eq!(decode_message::<f32>(&frame).unwrap(), env);
    }

    #[test]
    fn tensors_travel_as_f32() {
        let env: Envelope<f64> = Envelope::new(0, 0, Message::Descriptor(Descriptor(vec![0.1, 1.0 / 3.0])));
        let frame = encode_message(&env);
        assert_eq!(frame.payload.len(), 4 + 4 + 8);
        let Message::Descriptor(v) = decode_message::<f64>(&frame).unwrap().message else { panic!() };
        assert_eq!(v.0, vec![0.1f32 as f64, (1.0f32 / 3.0) as f64]);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let env: Envelope<f32> = Envelope::new(0, 0, Message::EmbedDelta(GradVector(vec![1.0])));
        let mut frame = encode_message(&env);
        frame.payload.push(0);
        assert!(decode_message::<f32>(&frame).is_err());
    }
}
