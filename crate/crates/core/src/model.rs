//! The assembled detector: frozen teacher, trainable student (trunk,
//! decouple layers, pyramid networks), and the segmentation head, each in
//! its own parameter store so the two optimization phases cannot disturb
//! one another.

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    build_decouple, build_trunk_copied, build_trunk_seeded, decouple_split, trunk_forward,
    trunk_stage, BackboneSpec, DecoupleParams, FeaturePyramid, PyramidRole, TrunkParams,
    TOY_TEACHER_SEED,
};
use crate::config::{AblationFlags, BackboneKind, RunConfig};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, ParamStore};
use crate::pyramid::{build_pmn, pmn_refine, Branch, PmnParams};
use crate::seg_head::{build_head, compute_stage_maps, fuse, pyramid_upsample, HeadParams};
use crate::tensor::{to_scalar, Tensor};

pub struct DmddModel {
    pub spec: BackboneSpec,
    pub flags: AblationFlags,
    pub trunk_trainable: bool,
    pub loss_weight_ngm: f64,
    pub loss_weight_aim: f64,
    pub score_top_k: usize,
    pub score_extra_sigmoid: bool,

    pub teacher: ParamStore,
    teacher_trunk: TrunkParams,
    pub student: ParamStore,
    student_trunk: TrunkParams,
    decouple: [DecoupleParams; 4],
    pmn_normality: PmnParams,
    pmn_abnormality: PmnParams,
    pub head: ParamStore,
    pub head_params: HeadParams,
}

impl DmddModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = BackboneSpec::new(cfg.backbone, cfg.input_size);

        let mut teacher = ParamStore::new();
        let teacher_trunk = match cfg.backbone {
            BackboneKind::Toy => build_trunk_seeded(&mut teacher, "teacher", &spec, TOY_TEACHER_SEED),
            BackboneKind::PretrainedWideresnet50 => {
                let trunk = build_trunk_seeded(&mut teacher, "teacher", &spec, TOY_TEACHER_SEED);
                let path = cfg.weights_path.as_ref().ok_or_else(|| {
                    Error::Config(
                        "backbone pretrained-wideresnet50 needs weights_path pointing at a \
                         converted weight bundle; no bundled weights ship with this crate"
                            .into(),
                    )
                })?;
                crate::checkpoint::load_tensors_into(std::path::Path::new(path), &mut teacher)?;
                trunk
            }
        };

        let mut student = ParamStore::new();
        let student_trunk = build_trunk_copied(&mut student, "student.trunk", &teacher, &teacher_trunk);
        let decouple = build_decouple(&mut student, "student", &spec);
        let pmn_normality = build_pmn(
            &mut student,
            "student.pmn_n",
            &spec,
            derive_seed(cfg.seed, "pmn-normality"),
        );
        let pmn_abnormality = build_pmn(
            &mut student,
            "student.pmn_a",
            &spec,
            derive_seed(cfg.seed, "pmn-abnormality"),
        );

        let mut head = ParamStore::new();
        let head_params = build_head(&mut head, "head", cfg.input_size, derive_seed(cfg.seed, "head"));

        Ok(DmddModel {
            spec,
            flags: cfg.ablation,
            trunk_trainable: cfg.trunk_trainable,
            loss_weight_ngm: cfg.loss_weight_ngm,
            loss_weight_aim: cfg.loss_weight_aim,
            score_top_k: cfg.score_top_k,
            score_extra_sigmoid: cfg.score_extra_sigmoid,
            teacher,
            teacher_trunk,
            student,
            student_trunk,
            decouple,
            pmn_normality,
            pmn_abnormality,
            head,
            head_params,
        })
    }

    /// Frozen teacher pyramid; parameters enter the tape unbound so no
    /// gradient can reach them.
    pub fn teacher_forward(&self, tape: &mut Tape, image: Var) -> FeaturePyramid {
        let stages = trunk_forward(tape, &self.teacher, &self.teacher_trunk, image, false);
        FeaturePyramid::new(stages, PyramidRole::Teacher)
    }

    /// Student pyramids (normality, abnormality). Stage i+1 consumes the
    /// normality half of stage i's decoupled output; both half-pyramids are
    /// then refined by their branch's pyramid network.
    pub fn student_forward(&self, tape: &mut Tape, image: Var) -> (FeaturePyramid, FeaturePyramid) {
        self.student_forward_with(tape, image, true)
    }

    /// As [`Self::student_forward`] with explicit trainability, used by the
    /// frozen passes of head training and inference.
    pub fn student_forward_with(
        &self,
        tape: &mut Tape,
        image: Var,
        trainable: bool,
    ) -> (FeaturePyramid, FeaturePyramid) {
        let trunk_trainable = trainable && self.trunk_trainable;
        let mut norm_stages = Vec::with_capacity(4);
        let mut abn_stages = Vec::with_capacity(4);
        let mut x = image;
        for i in 0..4 {
            let t = trunk_stage(
                tape,
                &self.student,
                &self.student_trunk.stages[i],
                x,
                i,
                trunk_trainable,
            );
            let (n, a) = decouple_split(
                tape,
                &self.student,
                &self.decouple[i],
                t,
                self.spec.stage_channels[i],
                trainable,
            );
            norm_stages.push(n);
            abn_stages.push(a);
            x = n;
        }
        let norm = FeaturePyramid::new(
            norm_stages.try_into().expect("4 stages"),
            PyramidRole::StudentNormality,
        );
        let abn = FeaturePyramid::new(
            abn_stages.try_into().expect("4 stages"),
            PyramidRole::StudentAbnormality,
        );
        let norm = pmn_refine(
            tape,
            &self.student,
            &self.pmn_normality,
            Branch::Normality,
            &norm,
            self.flags.pmn_inner,
            self.flags.pmn_outer,
            trainable,
        );
        let abn = pmn_refine(
            tape,
            &self.student,
            &self.pmn_abnormality,
            Branch::Abnormality,
            &abn,
            self.flags.pmn_inner,
            self.flags.pmn_outer,
            trainable,
        );
        (norm, abn)
    }

    /// The 8-channel upsampled distance-map stack for one image, computed
    /// with frozen parameters on a throwaway tape.
    pub fn stage_map_stack(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone());
        let teacher = self.teacher_forward(&mut tape, img);
        let (norm, abn) = self.student_forward_with(&mut tape, img, false);
        let maps = compute_stage_maps(&mut tape, &teacher, &norm, &abn)?;
        let stack = pyramid_upsample(&mut tape, &maps, self.spec.input_size, self.flags.pu);
        Ok(tape.value(stack).clone())
    }

    /// Inference: fused anomaly map in (0,1) at input resolution plus the
    /// top-k image score.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, f64)> {
        let stack = self.stage_map_stack(image)?;
        let mut tape = Tape::new();
        let stack = tape.leaf(stack);
        let m = fuse(
            &mut tape,
            &self.head,
            &self.head_params,
            stack,
            self.flags.mm,
            false,
        );
        let s = crate::seg_head::anomaly_score(
            &mut tape,
            m,
            self.score_top_k,
            self.score_extra_sigmoid,
        )?;
        Ok((tape.value(m).clone(), to_scalar(tape.value(s))))
    }

    pub fn teacher_hash(&self) -> String {
        self.teacher.content_hash()
    }

    pub fn student_hash(&self) -> String {
        self.student.content_hash()
    }

    pub fn head_hash(&self) -> String {
        self.head.content_hash()
    }
}
