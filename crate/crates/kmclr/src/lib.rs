//! Knowledge-enhanced multi-behavior recommendation: interaction and
//! knowledge-graph encoders trained with contrastive objectives, plus the
//! ranking-evaluation and training drivers built on them.

pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod kg;
pub mod mul;
pub mod params;
pub mod seed;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;
