pub mod corpusgen;
pub mod diffgen;
pub mod fstree;
pub mod layerstore;
pub mod linksim;
pub mod package;
pub mod reconstruct;
