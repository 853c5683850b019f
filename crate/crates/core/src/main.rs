use std::io;

fn main() {
    let code = sdde_morse::cli::main_from(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
