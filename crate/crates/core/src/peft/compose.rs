use std::sync::Arc;

use super::{PeftError, PeftModule};
use crate::model::{forward_with_hooks, BaseModel, ForwardTrace, HookMap};
use crate::tensor::{Tape, Var};

/// A frozen base with at most one PEFT module attached.
#[derive(Debug, Clone)]
pub struct ComposedModel {
    base: Arc<BaseModel>,
    module: Option<Box<dyn PeftModule>>,
}

/// Attaches `module` to `base`; the module must have been built for the
/// same base config.
pub fn attach(base: Arc<BaseModel>, module: Box<dyn PeftModule>) -> Result<ComposedModel, PeftError> {
    let mut m = ComposedModel::new(base);
    m.attach(module)?;
    Ok(m)
}

impl ComposedModel {
    pub fn new(base: Arc<BaseModel>) -> Self {
        Self { base, module: None }
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn base_arc(&self) -> &Arc<BaseModel> {
        &self.base
    }

    pub fn module(&self) -> Option<&dyn PeftModule> {
        self.module.as_deref()
    }

    pub fn module_mut(&mut self) -> Option<&mut (dyn PeftModule + 'static)> {
        self.module.as_deref_mut()
    }

    pub fn attach(&mut self, module: Box<dyn PeftModule>) -> Result<(), PeftError> {
        if let Some(existing) = &self.module {
            return Err(PeftError::Composition(format!(
                "a {} module already occupies this model",
                existing.technique()
            )));
        }
        let (want, got) = (self.base.config(), module.base_config());
        if want.fingerprint() != got.fingerprint() {
            return Err(PeftError::Composition(format!(
                "module was built for base `{}`, this base is `{}`",
                got.canonical_text(),
                want.canonical_text()
            )));
        }
        self.module = Some(module);
        Ok(())
    }

    pub fn detach(&mut self) -> Option<Box<dyn PeftModule>> {
        self.module.take()
    }

    /// Logits `[B, T, V]` for the real tokens only; positions of prepended
    /// virtual tokens are dropped. Also returns the full trace.
    pub fn forward_trace(&self, tape: &Tape, tokens: &[Vec<usize>]) -> Result<(Var, ForwardTrace), PeftError> {
        let hooks = match &self.module {
            Some(m) => m.hooks(),
            None => HookMap::new(),
        };
        let (logits, trace) = forward_with_hooks(&self.base, tape, tokens, &hooks)?;
        let s = tape.shape(logits);
        let t = tokens.first().map_or(0, Vec::len);
        let logits = if s[1] > t {
            tape.slice(logits, 1, s[1] - t, s[1])?
        } else {
            logits
        };
        Ok((logits, trace))
    }

    pub fn forward(&self, tape: &Tape, tokens: &[Vec<usize>]) -> Result<Var, PeftError> {
        Ok(self.forward_trace(tape, tokens)?.0)
    }
}
