//! The RASP subset: syntax, typing, value-set inference, text form and the
//! reference interpreter.

mod interp;
mod lambda;
mod program;
mod specs;
mod text;
mod value;

pub use interp::{check_input, default_value, interpret, mean, most_common, EvalError, Evaluated, Interpreter};
pub use lambda::{BinaryFn, LambdaId, Library, Predicate, UnaryFn};
pub use program::{node_types, Function, Node, Primitive, Program, RaspConfig, Ref, SopType, TypeError};
pub use specs::{
    all_inputs, infer_specs, infer_specs_with, position_injective, selector_shape, selector_shape_with, value_kinds,
    InferConfig, ProgramSpecs, SOpSpec, SelectorShape, SpecError, ValueKind,
};
pub use text::{parse, render, ParseError, TextError};
pub use value::{symbol_char, symbol_index, values_match, Domain, Value};
