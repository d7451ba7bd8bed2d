fn main() {
    let exit = coseg_cli::main_with_args(std::env::args_os());
    if let Some(msg) = exit.message {
        if exit.code == 0 {
            print!("{msg}");
        } else {
            eprintln!("{}", msg.trim_end());
        }
    }
    std::process::exit(exit.code);
}
