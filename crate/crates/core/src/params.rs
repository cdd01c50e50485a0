//! Named groups of trainable tensors and their bindings onto a [`Tape`].

use crate::error::Result;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Adam, Gradients, Tape, Tensor, Var};

/// A fixed, ordered set of named parameter tensors.
pub trait ParamGroup {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    fn write_into(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, t) in self.named() {
            ck.insert(format!("{prefix}{name}"), t.clone());
        }
    }
}

/// Declares a parameter struct `$name` holding tensors, plus `$vars` holding
/// the matching tape handles.
macro_rules! param_group {
    ($(#[$meta:meta])* $vis:vis struct $name:ident => $vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name {
            $(pub $field: $crate::tensor::Tensor,)+
        }

        #[derive(Clone, Copy, Debug)]
        $vis struct $vars {
            $(pub $field: $crate::tensor::Var,)+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            /// Records every tensor on `tape`; `trainable = false` records constants.
            pub fn bind(&self, tape: &mut $crate::tensor::Tape, trainable: bool) -> $vars {
                $vars {
                    $($field: if trainable {
                        tape.leaf(self.$field.clone())
                    } else {
                        tape.constant(self.$field.clone())
                    },)+
                }
            }

            pub fn read_from(
                prefix: &str,
                ck: &$crate::tensor::checkpoint::Checkpoint,
            ) -> $crate::error::Result<Self> {
                Ok($name {
                    $($field: ck.get(&format!("{prefix}{}", stringify!($field)))?.clone(),)+
                })
            }
        }

        impl $vars {
            pub fn vars(&self) -> Vec<$crate::tensor::Var> {
                vec![$(self.$field),+]
            }
        }

        impl $crate::params::ParamGroup for $name {
            fn named(&self) -> Vec<(&'static str, &$crate::tensor::Tensor)> {
                vec![$((stringify!($field), &self.$field)),+]
            }

            fn tensors_mut(&mut self) -> Vec<&mut $crate::tensor::Tensor> {
                vec![$(&mut self.$field),+]
            }
        }
    };
}

pub(crate) use param_group;

/// Applies one Adam update to `params` using the gradients recorded for `vars`
/// (same order). Non-finite gradients abort the step.
pub fn adam_update(
    adam: &mut Adam,
    mut params: Vec<&mut Tensor>,
    vars: &[Var],
    grads: &Gradients,
) -> Result<()> {
    let gs: Vec<Option<&[f64]>> = vars.iter().map(|&v| grads.get(v)).collect();
    for (g, v) in gs.iter().zip(vars) {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(crate::error::Error::NonFinite(format!(
                    "gradient of tape node {}",
                    v.index()
                )));
            }
        }
    }
    adam.step(&mut params, &gs)
}

/// Convenience: bind a single tensor.
pub fn bind_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}
