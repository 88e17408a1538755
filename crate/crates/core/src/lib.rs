pub mod cst;
pub mod dockerfile;
pub mod effect;
pub mod image;
pub mod pipeline;
pub mod probe;
pub mod scoring;
pub mod shell;
pub mod viewpoint;
