//! Host service for the simulated wristband.
//!
//! HTTP endpoints drive a [`session::Controller`]; the `/stream` WebSocket
//! carries [`messages::Envelope`]s fanned out by [`hub::Hub`].

pub mod cli;
pub mod config;
pub mod display;
pub mod http;
pub mod hub;
pub mod messages;
pub mod session;
