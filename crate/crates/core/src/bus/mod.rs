//! Publish/subscribe message bus.

pub mod broker;
pub mod frame;
pub mod tcp;
pub mod topic;

pub use broker::{Broker, BrokerError};
pub use frame::{decode_frame, encode_frame, BusEnvelope, EncodeError, FrameError, Kind, MAX_FRAME_BODY, MAX_PAYLOAD};
pub use tcp::{TcpBroker, TcpBusClient};
pub use topic::{match_topic, validate_filter, validate_topic, TopicError};
