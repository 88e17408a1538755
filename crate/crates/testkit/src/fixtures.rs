//! The fixture images used across the test suites.
//!
//! Each fixture pairs a Dockerfile (as it would be built after `RUN`
//! splitting) with a synthetic image whose history lines up with it, a
//! replay transcript answering every probe the pipeline can issue, and a
//! hand-written listing of the flattened filesystem.

use std::path::PathBuf;

use serde_json::json;

use crate::{ImageSpec, Member};

pub struct Fixture {
    pub name: &'static str,
    pub image: ImageSpec,
    /// Paths of executables (execute bit, parent on `PATH`) in the final
    /// filesystem.
    pub executables: &'static [&'static str],
}

impl Fixture {
    pub fn dir(&self) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(self.name)
    }

    pub fn dockerfile_path(&self) -> PathBuf {
        self.dir().join("Dockerfile")
    }

    pub fn dockerfile(&self) -> String {
        std::fs::read_to_string(self.dockerfile_path()).expect("fixture Dockerfile")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.dir().join("transcript.jsonl")
    }

    pub fn transcript(&self) -> String {
        std::fs::read_to_string(self.transcript_path()).expect("fixture transcript")
    }

    /// Expected alive paths of the flattened image, sorted.
    pub fn listing(&self) -> Vec<String> {
        std::fs::read_to_string(self.dir().join("listing.txt"))
            .expect("fixture listing")
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()
    }
}

pub fn all() -> Vec<Fixture> {
    vec![python(), minimal(), apt(), pathexec()]
}

const DEBIAN_PATH: &str = "PATH=/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

fn f(path: &str, mode: u32) -> Member {
    Member::file(path, mode, format!("content of {path}\n"))
}

fn debian_base(extra: Vec<Member>) -> Vec<Member> {
    let mut m = vec![
        Member::symlink("/bin", "usr/bin"),
        f("/etc/debian_version", 0o644),
        f("/etc/passwd", 0o644),
        Member::Dir { path: "/tmp".into(), mode: 0o1777 },
        f("/usr/bin/bash", 0o755),
        f("/usr/bin/which", 0o755),
        Member::dir("/var/cache/apt"),
        Member::dir("/var/lib/apt/lists"),
        f("/var/lib/dpkg/status", 0o644),
        Member::dir("/var/log"),
    ];
    m.extend(extra);
    m
}

/// A Python runtime image: `FROM`, a `RUN` installing python3 (split in
/// two), `COPY main.py`, `CMD`.
pub fn python() -> Fixture {
    let image = ImageSpec::new("fixture/python:latest")
        .layer(
            "/bin/sh -c #(nop) ADD file:6b5fdbe4a3c0e2a2d1e0f3 in / ",
            debian_base(vec![f("/usr/bin/ls", 0o755), f("/usr/lib/os-release", 0o644)]),
        )
        .empty("/bin/sh -c #(nop)  CMD [\"bash\"]")
        .layer(
            "RUN /bin/sh -c apt-get update # buildkit",
            vec![
                f("/var/lib/apt/lists/deb.debian.org_debian_dists_bookworm_InRelease", 0o644),
                f(
                    "/var/lib/apt/lists/deb.debian.org_debian_dists_bookworm_main_binary-amd64_Packages.lz4",
                    0o644,
                ),
                f("/var/cache/apt/pkgcache.bin", 0o644),
            ],
        )
        .layer(
            "RUN /bin/sh -c apt-get install -y python3 # buildkit",
            vec![
                f("/etc/python3.11/sitecustomize.py", 0o644),
                Member::symlink("/usr/bin/python3", "python3.11"),
                f("/usr/bin/python3.11", 0o755),
                f("/usr/lib/python3.11/os.py", 0o644),
                f("/usr/lib/python3/dist-packages/README.txt", 0o644),
                f("/usr/share/doc/python3/copyright", 0o644),
                f("/var/cache/apt/archives/python3.11_3.11.2-6_amd64.deb", 0o644),
                f("/var/lib/dpkg/status", 0o644),
                f("/var/log/apt/history.log", 0o644),
            ],
        )
        .layer("COPY main.py /main.py # buildkit", vec![f("/main.py", 0o644)])
        .empty("CMD [\"python3\" \"main.py\"]")
        .config(json!({
            "Env": [DEBIAN_PATH],
            "Cmd": ["python3", "main.py"],
        }));
    Fixture {
        name: "python",
        image,
        executables: &[
            "/usr/bin/bash",
            "/usr/bin/ls",
            "/usr/bin/python3",
            "/usr/bin/python3.11",
            "/usr/bin/which",
        ],
    }
}

/// `FROM scratch` plus a single copied file.
pub fn minimal() -> Fixture {
    let image = ImageSpec::new("fixture/minimal:latest")
        .raw_layer("COPY hello /hello # buildkit", vec![Member::file("/hello", 0o755, "#!/hello\n")])
        .config(json!({}));
    Fixture { name: "minimal", image, executables: &[] }
}

/// Debian image with a chained apt install, cache cleanup through
/// whiteouts and an opaque directory, copied config and scripts, and a
/// no-op `RUN`.
pub fn apt() -> Fixture {
    let lists = "/var/lib/apt/lists";
    let image = ImageSpec::new("fixture/apt:latest")
        .layer(
            "/bin/sh -c #(nop) ADD file:0a1b2c3d4e5f in / ",
            debian_base(vec![
                f("/var/cache/apt/srcpkgcache.bin", 0o644),
                f("/tmp/build-cache/obj.o", 0o644),
                Member::dir("/usr/share/doc"),
            ]),
        )
        .layer(
            "/bin/sh -c echo 'debian docs' > /usr/share/doc/debian/README",
            vec![f("/usr/share/doc/debian/README", 0o644)],
        )
        .empty("/bin/sh -c #(nop)  CMD [\"bash\"]")
        .empty("ENV APP_HOME=/opt/app")
        .empty("WORKDIR /opt/app")
        .layer(
            "RUN /bin/sh -c apt-get update # buildkit",
            vec![
                f(&format!("{lists}/deb.debian.org_debian_dists_bookworm_InRelease"), 0o644),
                f(
                    &format!("{lists}/deb.debian.org_debian_dists_bookworm_main_binary-amd64_Packages.lz4"),
                    0o644,
                ),
                f("/var/cache/apt/pkgcache.bin", 0o644),
            ],
        )
        .layer(
            "RUN /bin/sh -c apt-get install -y --no-install-recommends curl jq # buildkit",
            vec![
                f("/usr/bin/curl", 0o755),
                f("/usr/bin/jq", 0o755),
                Member::symlink("/usr/lib/x86_64-linux-gnu/libjq.so.1", "libjq.so.1.0.4"),
                f("/usr/lib/x86_64-linux-gnu/libjq.so.1.0.4", 0o644),
                f("/usr/share/doc/jq/copyright", 0o644),
                f("/var/cache/apt/archives/jq_1.6-2.1_amd64.deb", 0o644),
                f("/var/cache/apt/pkgcache.bin", 0o644),
                f("/var/lib/dpkg/status", 0o644),
                f("/var/log/apt/history.log", 0o644),
                f("/var/log/dpkg.log", 0o644),
            ],
        )
        .layer(
            "RUN /bin/sh -c rm -rf /var/lib/apt/lists/* # buildkit",
            vec![
                Member::dir(lists),
                Member::whiteout(&format!("{lists}/deb.debian.org_debian_dists_bookworm_InRelease")),
                Member::whiteout(&format!(
                    "{lists}/deb.debian.org_debian_dists_bookworm_main_binary-amd64_Packages.lz4"
                )),
            ],
        )
        .layer(
            "COPY config/app.conf /etc/app/conf/app.conf # buildkit",
            vec![f("/etc/app/conf/app.conf", 0o644)],
        )
        .layer("COPY init.sh /etc/app/conf/init.sh # buildkit", vec![f("/etc/app/conf/init.sh", 0o755)])
        .layer(
            "COPY scripts/ /opt/app/scripts/ # buildkit",
            vec![f("/opt/app/scripts/start.sh", 0o755), f("/opt/app/scripts/lib/common.sh", 0o644)],
        )
        .layer(
            "RUN /bin/sh -c rm -rf /var/cache/apt; mkdir -p /var/cache/apt # buildkit",
            vec![Member::dir("/var/cache/apt"), Member::opaque("/var/cache/apt")],
        )
        .layer(
            "RUN /bin/sh -c rm -rf /tmp/build-cache # buildkit",
            vec![Member::Dir { path: "/tmp".into(), mode: 0o1777 }, Member::whiteout("/tmp/build-cache")],
        )
        .empty("RUN /bin/sh -c true # buildkit")
        .empty("LABEL org.opencontainers.image.title=demo-app")
        .empty("EXPOSE map[8080/tcp:{}]")
        .empty("USER app")
        .empty("CMD [\"/opt/app/scripts/start.sh\"]")
        .config(json!({
            "Env": [DEBIAN_PATH, "APP_HOME=/opt/app"],
            "Cmd": ["/opt/app/scripts/start.sh"],
            "WorkingDir": "/opt/app",
            "User": "app",
            "ExposedPorts": {"8080/tcp": {}},
            "Labels": {"org.opencontainers.image.title": "demo-app"},
        }));
    Fixture {
        name: "apt",
        image,
        executables: &["/usr/bin/bash", "/usr/bin/curl", "/usr/bin/jq", "/usr/bin/which"],
    }
}

/// Alpine image with executables reached through symlinks, one shadowed
/// by an earlier `PATH` entry, one the container cannot locate, and a
/// runtime that prints its version on stderr.
pub fn pathexec() -> Fixture {
    let jvm = "/usr/lib/jvm/java-1.8-openjdk";
    let image = ImageSpec::new("fixture/pathexec:latest")
        .layer(
            "/bin/sh -c #(nop) ADD file:37a76ec18f9887751cd8473744917d08b7431fc4085097bb in / ",
            vec![
                f("/bin/busybox", 0o755),
                Member::symlink("/bin/sh", "/bin/busybox"),
                f("/etc/alpine-release", 0o644),
                f("/etc/apk/world", 0o644),
                f("/lib/ld-musl-x86_64.so.1", 0o755),
                f("/sbin/apk", 0o755),
                Member::Dir { path: "/tmp".into(), mode: 0o1777 },
                Member::symlink("/usr/bin/which", "/bin/busybox"),
                Member::dir("/usr/local/bin"),
                Member::dir("/usr/sbin"),
            ],
        )
        .empty("/bin/sh -c #(nop)  CMD [\"/bin/sh\"]")
        .layer(
            "RUN /bin/sh -c apk add --no-cache openjdk8-jre # buildkit",
            vec![
                f("/etc/apk/world", 0o644),
                f("/lib/apk/db/installed", 0o644),
                f(&format!("{jvm}/jre/bin/java"), 0o755),
                Member::hardlink(&format!("{jvm}/bin/java"), &format!("{jvm}/jre/bin/java")),
                f(&format!("{jvm}/jre/lib/rt.jar"), 0o644),
                Member::symlink("/usr/bin/java", &format!("{jvm}/jre/bin/java")),
            ],
        )
        .layer("COPY bin/tool /usr/local/bin/tool # buildkit", vec![f("/usr/local/bin/tool", 0o755)])
        .layer("COPY bin/legacy /usr/sbin/legacy # buildkit", vec![f("/usr/sbin/legacy", 0o755)])
        .layer("COPY bin/tool /usr/bin/tool # buildkit", vec![f("/usr/bin/tool", 0o755)])
        .layer("COPY tool.yaml /etc/tool/config.yaml # buildkit", vec![f("/etc/tool/config.yaml", 0o644)])
        .empty("ENTRYPOINT [\"tool\"]")
        .config(json!({
            "Env": [DEBIAN_PATH],
            "Entrypoint": ["tool"],
            "Cmd": null,
        }));
    Fixture {
        name: "pathexec",
        image,
        executables: &[
            "/bin/busybox",
            "/bin/sh",
            "/sbin/apk",
            "/usr/bin/java",
            "/usr/bin/tool",
            "/usr/bin/which",
            "/usr/local/bin/tool",
            "/usr/sbin/legacy",
        ],
    }
}
