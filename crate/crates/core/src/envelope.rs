// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::message::{Request, Response};
use crate::oracle::Verdict;
use crate::state::StateSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShadowKind {
    ToPatchService,
    ToRegression,
}

/// A duplicated request on its way to a shadow sink.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowEnvelope {
    pub kind: ShadowKind,
    pub request: Request,
    /// What production answered, for output comparison.
    pub response: Option<Response>,
    pub verdict: Verdict,
    /// Production write counter before the request ran.
    pub state_version: u64,
    /// Inline copy of the pre-request state, used when the receiver has
    /// no direct access to production snapshots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Arc<StateSnapshot>>,
    #[serde(default)]
    pub attempts: u32,
}

impl ShadowEnvelope {
    pub fn request_id(&self) -> &str {
        &self.request.request_id
    }
}

/// Accepts envelopes for asynchronous processing.
pub trait EnvelopeSink: Send + Sync {
    /// Returns false when the envelope was not accepted.
    fn submit(&self, envelope: ShadowEnvelope) -> bool;
}
