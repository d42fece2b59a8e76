//! Thin command-line frontend; all behavior lives in [`fbsdep::cli`].

fn main() {
    std::process::exit(fbsdep::cli::run(std::env::args_os()));
}
