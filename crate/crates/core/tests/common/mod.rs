pub mod flow;
pub mod grad_suite;
pub mod oracles;
pub mod restore;
pub mod routing;
pub mod saliency_cases;
pub mod stage1;
