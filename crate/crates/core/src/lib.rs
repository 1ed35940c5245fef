// SPDX-License-Identifier: Apache-2.0

pub mod app;
pub mod config;
pub mod envelope;
pub mod lang;
pub mod message;
pub mod oracle;
pub mod patch;
pub mod regression;
pub mod reporting;
pub mod sample;
pub mod sandbox;
pub mod server;
pub mod shadower;
pub mod state;
pub mod system;
pub mod workload;
