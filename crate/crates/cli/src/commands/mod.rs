pub mod analyze;
pub mod checks;
pub mod distill;
pub mod evaluate;
pub mod prepare;
pub mod teacher_cmd;
pub mod teacher_source;
