use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatProvider, Exchange, GatewayError, Stage, Usage};
use crate::schema::CallSchema;
use crate::trace::{EventKind, TraceLog};

/// Usage of one provider call, tagged with its stage and per-stage ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub stage: Stage,
    pub ordinal: u32,
    #[serde(flatten)]
    pub usage: Usage,
}

/// Wraps a provider, recording every successful call in the trace and in a
/// usage ledger.
pub struct Metered<'a> {
    inner: &'a mut dyn ChatProvider,
    trace: &'a TraceLog,
    calls: Vec<StageUsage>,
}

impl<'a> Metered<'a> {
    pub fn new(inner: &'a mut dyn ChatProvider, trace: &'a TraceLog) -> Self {
        Self {
            inner,
            trace,
            calls: Vec::new(),
        }
    }

    pub fn calls(&self) -> &[StageUsage] {
        &self.calls
    }

    pub fn into_calls(self) -> Vec<StageUsage> {
        self.calls
    }
}

impl ChatProvider for Metered<'_> {
    fn complete(
        &mut self,
        stage: Stage,
        messages: &[ChatMessage],
        tool_schemas: Option<&[CallSchema]>,
    ) -> Result<Exchange, GatewayError> {
        let ordinal = self.calls.iter().filter(|c| c.stage == stage).count() as u32 + 1;
        let exchange = self.inner.complete(stage, messages, tool_schemas)?;
        let usage = exchange.usage;
        self.calls.push(StageUsage { stage, ordinal, usage });
        self.trace.record(EventKind::ProviderCall {
            stage,
            ordinal,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            cost: usage.cost,
        });
        Ok(exchange)
    }
}
