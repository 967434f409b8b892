pub mod cli;
pub mod kv;
pub mod mixed;
pub mod model;
pub mod parallel;
pub mod ppm;
pub mod tokenizer;
pub mod train;
pub mod vocab;
pub mod window;
