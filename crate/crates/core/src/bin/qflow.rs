fn main() {
    eprintln!("qflow: not yet wired");
    std::process::exit(2);
}
